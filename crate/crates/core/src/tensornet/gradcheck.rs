//! Central finite-difference checks of the tape's analytic gradients.

use rand::Rng;
use rand_distr::StandardNormal;

use super::{Graph, ParamStore, Tensor, TensorError, Var};
use crate::rng;

/// Step used by the central differences.
pub const FD_STEP: f64 = 1e-5;

/// Norm-wise relative error `|a - b| / (|a| + |b|)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na + nb < 1e-12 {
        return diff;
    }
    diff / (na + nb)
}

/// Compares analytic and numeric gradients of `sum(f(inputs) ⊙ w)` for a
/// fixed random weighting `w`. Returns the worst relative error over inputs.
pub fn check<F>(inputs: &[Tensor<f64>], seed: u64, f: F) -> Result<f64, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let store = ParamStore::new();
    let mut weights: Option<Tensor<f64>> = None;
    let mut eval = |xs: &[Tensor<f64>], grad: bool| -> Result<(f64, Vec<Vec<f64>>), TensorError> {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone(), grad)).collect();
        let y = f(&mut g, &vars)?;
        let w = weights
            .get_or_insert_with(|| {
                let mut r = rng::stream(seed, &[0x6C]);
                let shape = g.shape(y).to_vec();
                let n = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| r.sample(StandardNormal)).collect()).expect("shape")
            })
            .clone();
        let wv = g.constant(w);
        let p = g.mul(y, wv)?;
        let loss = g.sum(p);
        let value = g.value(loss).item();
        if !grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let gs = vars
            .iter()
            .zip(xs)
            .map(|(v, x)| {
                grads
                    .input(*v)
                    .map(|t| t.to_f64_vec())
                    .unwrap_or_else(|| vec![0.0; x.len()])
            })
            .collect();
        Ok((value, gs))
    };

    let (_, analytic) = eval(inputs, true)?;
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0; x.len()];
        for i in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[k].data_mut()[i] = x.data()[i] + FD_STEP;
            let (plus, _) = eval(&xs, false)?;
            xs[k].data_mut()[i] = x.data()[i] - FD_STEP;
            let (minus, _) = eval(&xs, false)?;
            numeric[i] = (plus - minus) / (2.0 * FD_STEP);
        }
        worst = worst.max(relative_error(&analytic[k], &numeric));
    }
    Ok(worst)
}

/// Names accepted by [`check_primitive`].
pub const PRIMITIVES: &[&str] = &[
    "matmul",
    "matmul_nt",
    "bmm",
    "bmm_nt",
    "add",
    "sub",
    "mul",
    "add_bcast",
    "mul_bcast",
    "scale",
    "relu",
    "gelu",
    "layer_norm",
    "softmax",
    "log_softmax",
    "max_axis",
    "min_axis",
    "mean_axis",
    "sum",
    "mean",
    "reshape",
    "permute",
    "concat",
    "slice",
    "gather_rows",
    "pairwise_sq_dist",
    "chamfer_min_composition",
];

fn random(shape: &[usize], r: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    // keep clear of the kinks of relu/max so differences stay smooth
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = r.sample(StandardNormal);
            if v.abs() > 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

/// Gradient check of one primitive on seeded random inputs.
pub fn check_primitive(name: &str, seed: u64) -> Result<f64, TensorError> {
    let mut r = rng::stream(seed, &[0x6C0]);
    let mut rand = |s: &[usize]| random(s, &mut r);
    match name {
        "matmul" => check(&[rand(&[3, 4]), rand(&[4, 5])], seed, |g, v| g.matmul(v[0], v[1])),
        "matmul_nt" => check(&[rand(&[3, 4]), rand(&[5, 4])], seed, |g, v| g.matmul_nt(v[0], v[1])),
        "bmm" => check(&[rand(&[2, 3, 4]), rand(&[2, 4, 2])], seed, |g, v| g.bmm(v[0], v[1])),
        "bmm_nt" => check(&[rand(&[2, 3, 4]), rand(&[2, 5, 4])], seed, |g, v| g.bmm_nt(v[0], v[1])),
        "add" => check(&[rand(&[3, 4]), rand(&[3, 4])], seed, |g, v| g.add(v[0], v[1])),
        "sub" => check(&[rand(&[3, 4]), rand(&[3, 4])], seed, |g, v| g.sub(v[0], v[1])),
        "mul" => check(&[rand(&[3, 4]), rand(&[3, 4])], seed, |g, v| g.mul(v[0], v[1])),
        "add_bcast" => check(&[rand(&[2, 3, 4]), rand(&[3, 4])], seed, |g, v| g.add_bcast(v[0], v[1])),
        "mul_bcast" => check(&[rand(&[2, 3, 4]), rand(&[4])], seed, |g, v| g.mul_bcast(v[0], v[1])),
        "scale" => check(&[rand(&[5])], seed, |g, v| Ok(g.scale(v[0], -0.37))),
        "relu" => check(&[rand(&[12])], seed, |g, v| Ok(g.relu(v[0]))),
        "gelu" => check(&[rand(&[12])], seed, |g, v| Ok(g.gelu(v[0]))),
        "layer_norm" => check(&[rand(&[3, 6])], seed, |g, v| g.layer_norm(v[0], 1e-5)),
        "softmax" => check(&[rand(&[3, 5])], seed, |g, v| g.softmax(v[0])),
        "log_softmax" => check(&[rand(&[3, 5])], seed, |g, v| g.log_softmax(v[0])),
        "max_axis" => check(&[rand(&[3, 4, 5])], seed, |g, v| g.max_axis(v[0], 1)),
        "min_axis" => check(&[rand(&[3, 4, 5])], seed, |g, v| g.min_axis(v[0], 2)),
        "mean_axis" => check(&[rand(&[3, 4, 5])], seed, |g, v| g.mean_axis(v[0], 0)),
        "sum" => check(&[rand(&[7])], seed, |g, v| Ok(g.sum(v[0]))),
        "mean" => check(&[rand(&[7])], seed, |g, v| g.mean(v[0])),
        "reshape" => check(&[rand(&[2, 6])], seed, |g, v| g.reshape(v[0], &[3, 4])),
        "permute" => check(&[rand(&[2, 3, 4])], seed, |g, v| g.permute(v[0], &[2, 0, 1])),
        "concat" => check(&[rand(&[2, 3]), rand(&[2, 2])], seed, |g, v| g.concat(&[v[0], v[1]], 1)),
        "slice" => check(&[rand(&[4, 5])], seed, |g, v| g.slice(v[0], 1, 1, 3)),
        "gather_rows" => check(&[rand(&[4, 3])], seed, |g, v| g.gather_rows(v[0], &[2, 0, 2, 3])),
        "pairwise_sq_dist" => check(&[rand(&[2, 4, 3]), rand(&[2, 5, 3])], seed, |g, v| {
            g.pairwise_sq_dist(v[0], v[1])
        }),
        "chamfer_min_composition" => check(&[rand(&[1, 3, 3]), rand(&[1, 3, 3])], seed, |g, v| {
            let d = g.pairwise_sq_dist(v[0], v[1])?;
            let ab = g.min_axis(d, 2)?;
            let ba = g.min_axis(d, 1)?;
            let ab = g.mean(ab)?;
            let ba = g.mean(ba)?;
            g.add(ab, ba)
        }),
        other => Err(TensorError::BadShape {
            op: "check_primitive",
            shape: vec![],
            reason: format!("unknown primitive {other}"),
        }),
    }
}
