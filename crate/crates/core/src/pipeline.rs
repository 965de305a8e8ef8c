//! The differentiable chain from ISCMs to the SNR loss:
//! attention weights → weighted SCMs → MVDR → filtering → iSTFT → loss.

use std::sync::Arc;

use ndarray::{Array2, Array3, Array4};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvbf_autodiff::{gradcheck, AutodiffError, CustomOp, Graph, Tensor, Var};

use crate::attention::{network_features, AttentionNet, AttentionNetConfig};
use crate::mask::{compute_iscm, TimeFrequencyMask};
use crate::error::{Error, Result};
use crate::mvdr::{apply_filters_graph, mvdr_graph, scm_tensor};
use crate::signal::{Spectrogram, StftConfig, SynthesisPlan};

/// Lower bound on the distortion energy relative to the reference energy;
/// caps the loss at −120 dB.
pub const DISTORTION_FLOOR: f64 = 1e-12;

/// `−10 log10(‖s‖² / max(‖s − ŝ‖², 1e-12 ‖s‖²))`.
pub fn snr_loss(estimate: &[f64], reference: &[f64]) -> Result<f64> {
    if estimate.len() != reference.len() {
        return Err(Error::ShapeMismatch(format!("estimate {} vs reference {} samples", estimate.len(), reference.len())));
    }
    let es: f64 = reference.iter().map(|x| x * x).sum();
    if es == 0.0 {
        return Err(Error::UndefinedSnr("reference is silent".into()));
    }
    let ed: f64 = reference.iter().zip(estimate).map(|(s, e)| (s - e) * (s - e)).sum();
    Ok(-10.0 * (es / ed.max(DISTORTION_FLOOR * es)).log10())
}

/// Graph version of [`snr_loss`]; differentiable in `estimate`.
pub fn snr_loss_graph(g: &mut Graph, estimate: Var, reference: &[f64]) -> Result<Var> {
    if g.shape(estimate) != [reference.len()] {
        return Err(Error::ShapeMismatch(format!("estimate {:?} vs reference {} samples", g.shape(estimate), reference.len())));
    }
    let es: f64 = reference.iter().map(|x| x * x).sum();
    if es == 0.0 {
        return Err(Error::UndefinedSnr("reference is silent".into()));
    }
    let s = g.constant(Tensor::from_vec(reference.to_vec()));
    let d = g.sub(s, estimate)?;
    let d2 = g.mul(d, d)?;
    let ed = g.sum(d2);
    let ed = g.clamp_min(ed, DISTORTION_FLOOR * es);
    let l = g.ln(ed)?;
    let l = g.scale(l, 10.0 / std::f64::consts::LN_10);
    let offset = g.constant(Tensor::scalar(-10.0 * es.log10()));
    Ok(g.add(l, offset)?)
}

/// Inverse STFT of one channel where only `bins` come from the graph and
/// every other bin is taken from a fixed base spectrum.
struct IstftOp {
    plan: Arc<SynthesisPlan>,
    frames: usize,
    bins: Vec<usize>,
}

impl CustomOp for IstftOp {
    fn name(&self) -> &str {
        "istft"
    }

    fn backward(&self, _inputs: &[&Tensor], _output: &Tensor, grad_out: &Tensor) -> Vec<Option<Tensor>> {
        let f_count = self.plan.bins();
        let adj = self
            .plan
            .synthesize_adjoint(grad_out.data(), self.frames)
            .expect("output length validated in forward");
        let k = self.bins.len();
        let mut data = Vec::with_capacity(self.frames * k * 2);
        for t in 0..self.frames {
            for &f in &self.bins {
                let z = adj[t * f_count + f];
                data.push(z.re);
                data.push(z.im);
            }
        }
        vec![Some(Tensor::new(vec![self.frames, k, 2], data).expect("shape"))]
    }
}

/// `estimate` is `[T, K, 2]` for the listed bins; `base` is the full `T x F`
/// spectrum used for all other bins.
pub fn istft_graph(
    g: &mut Graph,
    plan: &Arc<SynthesisPlan>,
    estimate: Var,
    bins: &[usize],
    base: &[Complex64],
    out_len: usize,
) -> Result<Var> {
    let f_count = plan.bins();
    let shape = g.shape(estimate).to_vec();
    if shape.len() != 3 || shape[1] != bins.len() || shape[2] != 2 {
        return Err(Error::ShapeMismatch(format!("iSTFT input {shape:?} for {} bins", bins.len())));
    }
    let frames = shape[0];
    if base.len() != frames * f_count || bins.iter().any(|&f| f >= f_count) {
        return Err(Error::ShapeMismatch("base spectrum or bin list inconsistent with the STFT".into()));
    }
    let mut spec = base.to_vec();
    let v = g.value(estimate).data();
    for t in 0..frames {
        for (j, &f) in bins.iter().enumerate() {
            let o = (t * bins.len() + j) * 2;
            spec[t * f_count + f] = Complex64::new(v[o], v[o + 1]);
        }
    }
    let x = plan.synthesize(&spec, frames, out_len)?;
    let op = IstftOp { plan: Arc::clone(plan), frames, bins: bins.to_vec() };
    Ok(g.custom(&[estimate], Tensor::from_vec(x), Box::new(op)))
}

/// Per-utterance constants for one training step.
#[derive(Debug, Clone)]
pub struct StepInputs {
    /// Network inputs `[T, 2 F C²]`.
    pub features_s: Tensor,
    pub features_n: Tensor,
    /// Selected bins, ascending.
    pub bins: Vec<usize>,
    /// ISCMs of the selected bins, `[T, K C C 2]`.
    pub psi_s: Tensor,
    pub psi_n: Tensor,
    /// Observation of the selected bins, `[T, K, C, 2]`.
    pub obs: Tensor,
    /// Reference-channel mixture spectrum `T x F` for the untouched bins.
    pub base: Vec<Complex64>,
    pub reference: Vec<f64>,
    pub ref_channel: usize,
    pub channels: usize,
    pub loading: f64,
}

impl StepInputs {
    pub fn new(
        features_s: Tensor,
        features_n: Tensor,
        psi_s: &Array4<Complex64>,
        psi_n: &Array4<Complex64>,
        obs: &Array3<Complex64>,
        bins: Vec<usize>,
        reference: Vec<f64>,
        ref_channel: usize,
        loading: f64,
    ) -> Self {
        let (t_count, f_count, c, _) = psi_s.dim();
        let k = bins.len();
        let flat = |psi: &Array4<Complex64>| {
            scm_tensor(psi, &bins).reshaped(&[t_count, k * c * c * 2]).expect("same element count")
        };
        let mut y = Vec::with_capacity(t_count * k * c * 2);
        for t in 0..t_count {
            for &f in &bins {
                for ch in 0..c {
                    y.push(obs[[t, f, ch]].re);
                    y.push(obs[[t, f, ch]].im);
                }
            }
        }
        let base = (0..t_count).flat_map(|t| (0..f_count).map(move |f| (t, f))).map(|(t, f)| obs[[t, f, ref_channel]]).collect();
        Self {
            features_s,
            features_n,
            psi_s: flat(psi_s),
            psi_n: flat(psi_n),
            obs: Tensor::new(vec![t_count, k, c, 2], y).expect("shape"),
            bins,
            base,
            reference,
            ref_channel,
            channels: c,
            loading,
        }
    }

    pub fn frames(&self) -> usize {
        self.features_s.shape()[0]
    }
}

/// Records the whole chain and returns the scalar SNR loss.
pub fn pipeline_loss(
    g: &mut Graph,
    plan: &Arc<SynthesisPlan>,
    net_s: &AttentionNet,
    vars_s: &[Var],
    net_n: &AttentionNet,
    vars_n: &[Var],
    inputs: &StepInputs,
) -> Result<Var> {
    let t_count = inputs.frames();
    let k = inputs.bins.len();
    let c = inputs.channels;
    let fs = g.constant(inputs.features_s.clone());
    let fnz = g.constant(inputs.features_n.clone());
    let a_s = net_s.forward_graph(g, vars_s, fs)?;
    let a_n = net_n.forward_graph(g, vars_n, fnz)?;
    let psi_s = g.constant(inputs.psi_s.clone());
    let psi_n = g.constant(inputs.psi_n.clone());
    let phi_s = g.matmul(a_s, psi_s)?;
    let phi_n = g.matmul(a_n, psi_n)?;
    let phi_s = g.reshape(phi_s, &[t_count, k, c, c, 2])?;
    let phi_n = g.reshape(phi_n, &[t_count, k, c, c, 2])?;
    let w = mvdr_graph(g, phi_s, phi_n, inputs.ref_channel, inputs.loading)?;
    let y = g.constant(inputs.obs.clone());
    let s_hat = apply_filters_graph(g, w, y)?;
    let x = istft_graph(g, plan, s_hat, &inputs.bins, &inputs.base, inputs.reference.len())?;
    snr_loss_graph(g, x, &inputs.reference)
}

/// Finite-difference check of the whole chain on a tiny random problem
/// (2 channels, 3 bins, 4 frames). Returns the worst relative error over the
/// parameters of both networks.
pub fn pipeline_gradcheck(seed: u64) -> Result<f64> {
    let cfg = StftConfig::new(4.0, 1.0, 1000);
    let plan = Arc::new(SynthesisPlan::new(&cfg)?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t_count, c) = (4, 2);
    let f_count = plan.bins();
    let obs = Spectrogram {
        coeffs: Array3::from_shape_fn((t_count, f_count, c), |_| {
            Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
        }),
        frame_len_samples: plan.frame_len(),
        hop_samples: plan.hop(),
        fft_size: plan.fft_size(),
        sample_rate: cfg.sample_rate,
    };
    let mask_s = TimeFrequencyMask::new(Array2::from_shape_fn((t_count, f_count), |_| rng.gen_range(0.1..0.9)))?;
    let mask_n = mask_s.complement();
    let iscm_s = compute_iscm(&obs, &mask_s)?;
    let iscm_n = compute_iscm(&obs, &mask_n)?;
    let reference: Vec<f64> = (0..t_count).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let net_cfg = |seed| AttentionNetConfig {
        d_model: 4,
        d_ff: 8,
        n_heads: 2,
        n_blocks: 2,
        use_positional_encoding: false,
        seed,
    };
    let features_s = network_features(&iscm_s);
    let features_n = network_features(&iscm_n);
    let net_s = AttentionNet::new(net_cfg(seed.wrapping_add(1)), features_s.dim())?;
    let net_n = AttentionNet::new(net_cfg(seed.wrapping_add(2)), features_n.dim())?;
    let inputs = StepInputs::new(
        features_s.to_tensor(),
        features_n.to_tensor(),
        &iscm_s.psi,
        &iscm_n.psi,
        &obs.coeffs,
        (0..f_count).collect(),
        reference,
        0,
        crate::mvdr::DEFAULT_LOADING,
    );
    let ns = net_s.params().len();
    let params: Vec<Tensor> = (0..ns)
        .map(|i| net_s.params().value(i).clone())
        .chain((0..net_n.params().len()).map(|i| net_n.params().value(i).clone()))
        .collect();
    let err = gradcheck::check(
        &params,
        |g, v| {
            pipeline_loss(g, &plan, &net_s, &v[..ns], &net_n, &v[ns..], &inputs)
                .map_err(|e| AutodiffError::InvalidArgument { op: "pipeline", msg: e.to_string() })
        },
        1e-5,
        seed,
    )?;
    Ok(err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_closed_forms() {
        let s = vec![1.0, -2.0, 0.5, 3.0];
        let half: Vec<f64> = s.iter().map(|x| 0.5 * x).collect();
        assert!((snr_loss(&half, &s).unwrap() + 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!(snr_loss(&[0.0; 4], &s).unwrap().abs() < 1e-12);
        assert!((snr_loss(&s, &s).unwrap() + 120.0).abs() < 1e-9);
        assert!(matches!(snr_loss(&s, &[0.0; 4]), Err(Error::UndefinedSnr(_))));
        assert!(snr_loss(&s[..3], &s).is_err());

        let mut g = Graph::new();
        let e = g.param(Tensor::from_vec(half.clone()));
        let l = snr_loss_graph(&mut g, e, &s).unwrap();
        assert!((g.value(l).item() - snr_loss(&half, &s).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn istft_op_gradient() {
        let cfg = StftConfig::new(8.0, 2.0, 1000);
        let plan = Arc::new(SynthesisPlan::new(&cfg).unwrap());
        let frames = 6;
        let f_count = plan.bins();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<Complex64> =
            (0..frames * f_count).map(|_| Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))).collect();
        let bins = vec![0, 2, f_count - 1];
        let x = Tensor::new(vec![frames, 3, 2], (0..frames * 6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let out_len = plan.max_output_len(frames) - 1;
        let err = gradcheck::check(
            &[x],
            |g, v| {
                istft_graph(g, &plan, v[0], &bins, &base, out_len)
                    .map_err(|e| AutodiffError::InvalidArgument { op: "istft", msg: e.to_string() })
            },
            1e-6,
            3,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn whole_chain_matches_finite_differences() {
        for seed in [1, 2] {
            let err = pipeline_gradcheck(seed).unwrap();
            assert!(err < 1e-3, "seed {seed}: relative error {err}");
        }
    }
}
