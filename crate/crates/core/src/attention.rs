//! Self-attention estimator of frame-level SCM weights.
//!
//! The network reads the unfolded ISCMs of every frame, runs a stack of
//! Transformer-encoder blocks and ends in a single-head attention layer whose
//! softmax matrix `A[t, t']` is used directly as the SCM weights.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tvbf_autodiff::{Graph, ParameterStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::mask::IscmSequence;
use crate::scm::{apply_weights, smooth_weights, AttentionWeightMatrix, ScmSequence};

/// Unfolded ISCMs, one row of length `2 F C²` per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorizedIscm {
    pub data: Array2<f64>,
}

impl VectorizedIscm {
    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dim(&self) -> usize {
        self.data.ncols()
    }

    pub fn to_tensor(&self) -> Tensor {
        let (t, d) = self.data.dim();
        Tensor::new(vec![t, d], self.data.iter().copied().collect()).expect("consistent shape")
    }
}

/// Layout per frame: for each bin, the `C x C` real parts row-major, then the
/// imaginary parts row-major.
pub fn vectorize_iscms(iscms: &IscmSequence) -> VectorizedIscm {
    let (t_count, f_count, c, _) = iscms.psi.dim();
    let cc = c * c;
    let mut data = Array2::zeros((t_count, 2 * f_count * cc));
    for t in 0..t_count {
        for f in 0..f_count {
            let base = 2 * f * cc;
            for i in 0..c {
                for j in 0..c {
                    let z = iscms.psi[[t, f, i, j]];
                    data[[t, base + i * c + j]] = z.re;
                    data[[t, base + cc + i * c + j]] = z.im;
                }
            }
        }
    }
    VectorizedIscm { data }
}

/// Network input: ISCMs divided per bin by the utterance-mean trace, so
/// every bin contributes on a comparable scale regardless of loudness.
pub fn network_features(iscms: &IscmSequence) -> VectorizedIscm {
    let (t_count, f_count, c, _) = iscms.psi.dim();
    let mean_trace: Vec<f64> = (0..f_count)
        .map(|f| {
            (0..t_count).map(|t| (0..c).map(|i| iscms.psi[[t, f, i, i]].re).sum::<f64>()).sum::<f64>()
                / t_count.max(1) as f64
        })
        .collect();
    let global = mean_trace.iter().sum::<f64>() / f_count.max(1) as f64;
    let floor = 1e-6 * global + 1e-30;
    let mut v = vectorize_iscms(iscms);
    let cc = c * c;
    for f in 0..f_count {
        let k = 1.0 / (mean_trace[f] + floor);
        v.data.slice_mut(ndarray::s![.., 2 * f * cc..2 * (f + 1) * cc]).mapv_inplace(|x| x * k);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionNetConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Total blocks including the final single-head attention layer.
    pub n_blocks: usize,
    #[serde(default)]
    pub use_positional_encoding: bool,
    pub seed: u64,
}

impl Default for AttentionNetConfig {
    fn default() -> Self {
        Self { d_model: 64, d_ff: 256, n_heads: 4, n_blocks: 2, use_positional_encoding: false, seed: 0 }
    }
}

impl AttentionNetConfig {
    /// Full-size network: 256-dim model, 2048-dim feed-forward, 4 heads, 6 blocks.
    pub fn large() -> Self {
        Self { d_model: 256, d_ff: 2048, n_heads: 4, n_blocks: 6, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!("d_model {} not divisible by {} heads", self.d_model, self.n_heads)));
        }
        if self.n_blocks == 0 {
            return Err(Error::Config("at least one block (the output attention) is required".into()));
        }
        Ok(())
    }
}

/// Parameters of one attention network; the store order is fixed by
/// construction so graphs can address parameters by index.
#[derive(Debug, Clone)]
pub struct AttentionNet {
    config: AttentionNetConfig,
    input_dim: usize,
    params: ParameterStore,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let b = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-b..b)).collect()).expect("shape")
}

struct Layout {
    in_w: usize,
    in_b: usize,
    blocks: Vec<BlockIdx>,
    out_wq: usize,
    out_bq: usize,
    out_wk: usize,
}

struct BlockIdx {
    wq: usize,
    bq: usize,
    wk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln1_g: usize,
    ln1_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    ln2_g: usize,
    ln2_b: usize,
}

impl AttentionNet {
    pub fn new(config: AttentionNetConfig, input_dim: usize) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dff) = (config.d_model, config.d_ff);
        let mut p = ParameterStore::new();
        p.insert("in.w", uniform(&mut rng, &[input_dim, d], input_dim))?;
        p.insert("in.b", Tensor::zeros(&[d]))?;
        for i in 0..config.n_blocks - 1 {
            for name in ["wq", "wk", "wv", "wo"] {
                p.insert(format!("blk{i}.{name}"), uniform(&mut rng, &[d, d], d))?;
                // a key bias shifts every logit of a row equally, so it is omitted
                if name != "wk" {
                    p.insert(format!("blk{i}.b{}", &name[1..]), Tensor::zeros(&[d]))?;
                }
            }
            p.insert(format!("blk{i}.ln1.g"), Tensor::full(&[d], 1.0))?;
            p.insert(format!("blk{i}.ln1.b"), Tensor::zeros(&[d]))?;
            p.insert(format!("blk{i}.ff.w1"), uniform(&mut rng, &[d, dff], d))?;
            p.insert(format!("blk{i}.ff.b1"), Tensor::zeros(&[dff]))?;
            p.insert(format!("blk{i}.ff.w2"), uniform(&mut rng, &[dff, d], dff))?;
            p.insert(format!("blk{i}.ff.b2"), Tensor::zeros(&[d]))?;
            p.insert(format!("blk{i}.ln2.g"), Tensor::full(&[d], 1.0))?;
            p.insert(format!("blk{i}.ln2.b"), Tensor::zeros(&[d]))?;
        }
        p.insert("out.wq", uniform(&mut rng, &[d, d], d))?;
        p.insert("out.bq", Tensor::zeros(&[d]))?;
        p.insert("out.wk", uniform(&mut rng, &[d, d], d))?;
        Ok(Self { config, input_dim, params: p })
    }

    /// Rebuilds a network around a stored parameter set.
    pub fn from_params(config: AttentionNetConfig, params: ParameterStore) -> Result<Self> {
        let template = Self::new(config.clone(), params.get("in.w")?.shape()[0])?;
        if template.params.names() != params.names() {
            return Err(Error::Config("parameter names do not match the network configuration".into()));
        }
        for (i, name) in params.names().iter().enumerate() {
            if template.params.value(i).shape() != params.value(i).shape() {
                return Err(Error::Config(format!("parameter {name} has the wrong shape")));
            }
        }
        Ok(Self { config, input_dim: template.input_dim, params })
    }

    pub fn config(&self) -> &AttentionNetConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParameterStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterStore {
        &mut self.params
    }

    fn layout(&self) -> Layout {
        let ix = |n: &str| self.params.index_of(n).expect("parameter created in new");
        Layout {
            in_w: ix("in.w"),
            in_b: ix("in.b"),
            blocks: (0..self.config.n_blocks - 1)
                .map(|i| {
                    let b = |n: &str| ix(&format!("blk{i}.{n}"));
                    BlockIdx {
                        wq: b("wq"),
                        bq: b("bq"),
                        wk: b("wk"),
                        wv: b("wv"),
                        bv: b("bv"),
                        wo: b("wo"),
                        bo: b("bo"),
                        ln1_g: b("ln1.g"),
                        ln1_b: b("ln1.b"),
                        w1: b("ff.w1"),
                        b1: b("ff.b1"),
                        w2: b("ff.w2"),
                        b2: b("ff.b2"),
                        ln2_g: b("ln2.g"),
                        ln2_b: b("ln2.b"),
                    }
                })
                .collect(),
            out_wq: ix("out.wq"),
            out_bq: ix("out.bq"),
            out_wk: ix("out.wk"),
        }
    }

    /// Inserts the parameters as constants (inference) or differentiable
    /// leaves (training).
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        if trainable {
            self.params.bind(g)
        } else {
            (0..self.params.len()).map(|i| g.constant(self.params.value(i).clone())).collect()
        }
    }

    /// Records the forward pass on `g`; `features` is `[T, input_dim]`.
    /// Returns the `[T, T]` row-stochastic weight matrix.
    pub fn forward_graph(&self, g: &mut Graph, p: &[Var], features: Var) -> Result<Var> {
        let shape = g.shape(features).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::ShapeMismatch(format!(
                "features {:?} for a network expecting [T, {}]",
                shape, self.input_dim
            )));
        }
        let t_count = shape[0];
        if t_count == 0 {
            return Err(Error::InvalidInput("cannot attend over zero frames".into()));
        }
        let d = self.config.d_model;
        let lay = self.layout();
        let linear = |g: &mut Graph, x: Var, w: usize, b: usize| -> Result<Var> {
            let y = g.matmul(x, p[w])?;
            Ok(g.add(y, p[b])?)
        };
        let mut z = linear(g, features, lay.in_w, lay.in_b)?;
        if self.config.use_positional_encoding {
            let pe = g.constant(positional_encoding(t_count, d));
            z = g.add(z, pe)?;
        }
        let heads = self.config.n_heads;
        let dh = d / heads;
        for blk in &lay.blocks {
            let q = linear(g, z, blk.wq, blk.bq)?;
            let k = g.matmul(z, p[blk.wk])?;
            let v = linear(g, z, blk.wv, blk.bv)?;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = g.slice(q, 1, h * dh, dh)?;
                let kh = g.slice(k, 1, h * dh, dh)?;
                let vh = g.slice(v, 1, h * dh, dh)?;
                let kt = g.transpose(kh)?;
                let logits = g.matmul(qh, kt)?;
                let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
                let a = g.softmax(logits)?;
                outs.push(g.matmul(a, vh)?);
            }
            let cat = if heads == 1 { outs[0] } else { g.concat(&outs, 1)? };
            let att = linear(g, cat, blk.wo, blk.bo)?;
            let res = g.add(z, att)?;
            let z1 = g.layer_norm(res, p[blk.ln1_g], p[blk.ln1_b], 1e-5)?;
            let hidden = linear(g, z1, blk.w1, blk.b1)?;
            let hidden = g.relu(hidden);
            let ff = linear(g, hidden, blk.w2, blk.b2)?;
            let res = g.add(z1, ff)?;
            z = g.layer_norm(res, p[blk.ln2_g], p[blk.ln2_b], 1e-5)?;
        }
        let q = linear(g, z, lay.out_wq, lay.out_bq)?;
        let k = g.matmul(z, p[lay.out_wk])?;
        let kt = g.transpose(k)?;
        let logits = g.matmul(q, kt)?;
        let logits = g.scale(logits, 1.0 / (d as f64).sqrt());
        Ok(g.softmax(logits)?)
    }

    /// Inference on already prepared features.
    pub fn forward(&self, features: &VectorizedIscm) -> Result<AttentionWeightMatrix> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(features.to_tensor());
        let a = self.forward_graph(&mut g, &p, x)?;
        let t = features.frames();
        let w = Array2::from_shape_vec((t, t), g.value(a).data().to_vec()).expect("T x T");
        AttentionWeightMatrix::shared(w)
    }

    /// Weights for a sequence of ISCMs.
    pub fn weights_for(&self, iscms: &IscmSequence) -> Result<AttentionWeightMatrix> {
        self.forward(&network_features(iscms))
    }
}

/// Standard sinusoidal position code `[T, d]`.
pub fn positional_encoding(frames: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; frames * d];
    for t in 0..frames {
        for i in 0..d {
            let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let a = t as f64 * rate;
            data[t * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::new(vec![frames, d], data).expect("shape")
}

/// Attention weights and SCMs for speech and noise.
#[derive(Debug, Clone)]
pub struct AttentionScms {
    pub weights_s: AttentionWeightMatrix,
    pub weights_n: AttentionWeightMatrix,
    pub scm_s: ScmSequence,
    pub scm_n: ScmSequence,
}

/// Runs both networks, optionally smooths their weights over `l_prime`
/// neighbouring query frames, and accumulates the SCMs.
pub fn build_scms(
    net_s: &AttentionNet,
    net_n: &AttentionNet,
    iscms_s: &IscmSequence,
    iscms_n: &IscmSequence,
    l_prime: usize,
) -> Result<AttentionScms> {
    if iscms_s.psi.dim() != iscms_n.psi.dim() {
        return Err(Error::ShapeMismatch(format!(
            "speech ISCMs {:?} vs noise ISCMs {:?}",
            iscms_s.psi.dim(),
            iscms_n.psi.dim()
        )));
    }
    let ws = net_s.weights_for(iscms_s)?;
    let wn = net_n.weights_for(iscms_n)?;
    build_scms_from_weights(ws, wn, iscms_s, iscms_n, l_prime)
}

/// Same as [`build_scms`] with externally supplied weights.
pub fn build_scms_from_weights(
    weights_s: AttentionWeightMatrix,
    weights_n: AttentionWeightMatrix,
    iscms_s: &IscmSequence,
    iscms_n: &IscmSequence,
    l_prime: usize,
) -> Result<AttentionScms> {
    let weights_s = smooth_weights(&weights_s, l_prime);
    let weights_n = smooth_weights(&weights_n, l_prime);
    let scm_s = apply_weights(&weights_s, iscms_s)?;
    let scm_n = apply_weights(&weights_n, iscms_n)?;
    Ok(AttentionScms { weights_s, weights_n, scm_s, scm_n })
}
