//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n) * (a - n)).sum::<f64>().sqrt();
    let na = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-10)
}

/// Compares analytic gradients of `build` with central differences.
///
/// The (possibly non-scalar) output is reduced to a scalar by a fixed random
/// projection so that every output element is checked. Returns the largest
/// per-input relative error.
pub fn check<F>(inputs: &[Tensor], build: F, h: f64, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let probe_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let n: usize = probe_shape.iter().product();
    let proj = Tensor::new(probe_shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;

    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        Ok(g.value(out).data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let p = g.constant(proj.clone());
    let prod = g.mul(out, p)?;
    let loss = g.sum(prod);
    g.backward(loss)?;

    let mut worst = 0.0_f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vars[k])
            .map(|t| t.data().to_vec())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        let mut vals = inputs.to_vec();
        for j in 0..input.len() {
            let x0 = input.data()[j];
            vals[k].data_mut()[j] = x0 + h;
            let fp = eval(&vals)?;
            vals[k].data_mut()[j] = x0 - h;
            let fm = eval(&vals)?;
            vals[k].data_mut()[j] = x0;
            numeric[j] = (fp - fm) / (2.0 * h);
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone)]
pub struct OpCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape")
}

/// Random complex matrices that are comfortably invertible.
fn rand_well_conditioned(rng: &mut ChaCha8Rng, batch: usize, c: usize) -> Tensor {
    let mut t = rand_tensor(rng, &[batch, c, c, 2], -0.5, 0.5);
    let d = t.data_mut();
    for b in 0..batch {
        for i in 0..c {
            d[(b * c * c + i * c + i) * 2] += 2.0;
        }
    }
    t
}

/// Values bounded away from `|x| < margin`.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor {
    let mut t = rand_tensor(rng, shape, -1.0, 1.0);
    for v in t.data_mut() {
        *v = v.signum() * (v.abs() + margin);
    }
    t
}

type Builder = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// Every differentiable op with a representative random input.
pub fn op_cases(seed: u64) -> Vec<(&'static str, Vec<Tensor>, Builder)> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut r;
    vec![
        (
            "add",
            vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0), rand_tensor(rng, &[3, 4], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![rand_tensor(rng, &[3, 4], -1.0, 1.0), rand_tensor(rng, &[4], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0), rand_tensor(rng, &[4], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.mul(v[0], v[1])),
        ),
        (
            "scale",
            vec![rand_tensor(rng, &[5], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| Ok(g.scale(v[0], -1.7))),
        ),
        (
            "matmul",
            vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0), rand_tensor(rng, &[4, 5], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1])),
        ),
        (
            "matmul_batched",
            vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0), rand_tensor(rng, &[2, 4, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.matmul(v[0], v[1])),
        ),
        (
            "complex_matmul",
            vec![rand_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0), rand_tensor(rng, &[2, 2, 3, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.complex_matmul(v[0], v[1])),
        ),
        (
            "transpose",
            vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.transpose(v[0])),
        ),
        (
            "conj",
            vec![rand_tensor(rng, &[3, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.conj(v[0])),
        ),
        (
            "complex_hermitian",
            vec![rand_tensor(rng, &[2, 3, 2, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.complex_hermitian(v[0])),
        ),
        (
            "reshape",
            vec![rand_tensor(rng, &[2, 6], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.reshape(v[0], &[3, 4])),
        ),
        (
            "concat",
            vec![rand_tensor(rng, &[2, 3], -1.0, 1.0), rand_tensor(rng, &[2, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.concat(&[v[0], v[1]], 1)),
        ),
        (
            "slice",
            vec![rand_tensor(rng, &[3, 5, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.slice(v[0], 1, 1, 3)),
        ),
        (
            "repeat_axis",
            vec![rand_tensor(rng, &[3, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.repeat_axis(v[0], 1, 4)),
        ),
        (
            "softmax",
            vec![rand_tensor(rng, &[3, 5], -2.0, 2.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.softmax(v[0])),
        ),
        (
            "sum",
            vec![rand_tensor(rng, &[3, 4], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]))),
        ),
        (
            "mean",
            vec![rand_tensor(rng, &[3, 4], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| Ok(g.mean(v[0]))),
        ),
        (
            "sum_axis",
            vec![rand_tensor(rng, &[2, 3, 4], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.sum_axis(v[0], 1)),
        ),
        (
            "relu",
            vec![rand_away_from_zero(rng, &[4, 3], 0.1)],
            Box::new(|g: &mut Graph, v: &[Var]| Ok(g.relu(v[0]))),
        ),
        (
            "layer_norm",
            vec![
                rand_tensor(rng, &[3, 6], -2.0, 2.0),
                rand_tensor(rng, &[6], 0.5, 1.5),
                rand_tensor(rng, &[6], -0.5, 0.5),
            ],
            Box::new(|g: &mut Graph, v: &[Var]| g.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        (
            "complex_matrix_inverse",
            vec![rand_well_conditioned(rng, 3, 3)],
            Box::new(|g: &mut Graph, v: &[Var]| g.complex_matrix_inverse(v[0])),
        ),
        (
            "trace",
            vec![rand_tensor(rng, &[2, 3, 3, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.trace(v[0])),
        ),
        (
            "real_part",
            vec![rand_tensor(rng, &[4, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.real_part(v[0])),
        ),
        (
            "magnitude_squared",
            vec![rand_tensor(rng, &[4, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.magnitude_squared(v[0])),
        ),
        (
            "complex_mul",
            vec![rand_tensor(rng, &[3, 4, 2], -1.0, 1.0), rand_tensor(rng, &[4, 2], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.complex_mul(v[0], v[1])),
        ),
        (
            "complex_div",
            vec![rand_tensor(rng, &[3, 4, 2], -1.0, 1.0), rand_away_from_zero(rng, &[3, 4, 2], 0.5)],
            Box::new(|g: &mut Graph, v: &[Var]| g.complex_div(v[0], v[1])),
        ),
        (
            "diag_embed",
            vec![rand_tensor(rng, &[2, 3], -1.0, 1.0)],
            Box::new(|g: &mut Graph, v: &[Var]| Ok(g.diag_embed(v[0], 3))),
        ),
        (
            "ln",
            vec![rand_tensor(rng, &[5], 0.5, 2.0)],
            Box::new(|g: &mut Graph, v: &[Var]| g.ln(v[0])),
        ),
        (
            "clamp_min",
            vec![rand_away_from_zero(rng, &[6], 0.1)],
            Box::new(|g: &mut Graph, v: &[Var]| Ok(g.clamp_min(v[0], 0.0))),
        ),
    ]
}

/// Runs [`check`] on every op case.
pub fn op_suite(seed: u64) -> Result<Vec<OpCheck>> {
    op_cases(seed)
        .into_iter()
        .map(|(name, inputs, build)| {
            check(&inputs, |g, v| build(g, v), 1e-5, seed).map(|e| OpCheck { name, max_rel_err: e })
        })
        .collect()
}
