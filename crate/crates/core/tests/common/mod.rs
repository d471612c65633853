#![allow(dead_code)]

use pqfl::fedcore::{Architecture, ClientDataset};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight-line forward pass: mean softmax cross-entropy with ReLU hidden
/// layers. Kept independent of the library's forward pass.
pub fn naive_loss(arch: &Architecture, params: &[f64], data: &ClientDataset, rows: &[usize]) -> f64 {
    let mut dims = vec![arch.input_dim];
    dims.extend(&arch.hidden_dims);
    dims.push(arch.num_classes);
    let mut total = 0.0;
    for &r in rows {
        let mut x: Vec<f64> = data.row(r).iter().map(|&v| f64::from(v)).collect();
        let mut off = 0;
        for l in 0..dims.len() - 1 {
            let (n_in, n_out) = (dims[l], dims[l + 1]);
            let mut y = vec![0.0; n_out];
            for (o, yo) in y.iter_mut().enumerate() {
                let mut z = params[off + n_out * n_in + o];
                for i in 0..n_in {
                    z += params[off + o * n_in + i] * x[i];
                }
                *yo = if l + 2 < dims.len() { z.max(0.0) } else { z };
            }
            off += n_out * n_in + n_out;
            x = y;
        }
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
        total += lse - x[data.label(r) as usize];
    }
    total / rows.len() as f64
}

/// Central differences of [`naive_loss`].
pub fn fd_grad(arch: &Architecture, params: &[f64], data: &ClientDataset, rows: &[usize], h: f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = naive_loss(arch, &p, data, rows);
            p[i] = orig - h;
            let down = naive_loss(arch, &p, data, rows);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// A random small architecture, dataset and parameter vector.
pub fn random_instance(seed: u64) -> (Architecture, ClientDataset, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = rng.random_range(2..6);
    let classes = rng.random_range(2..5);
    let arch = if seed % 2 == 0 {
        Architecture::logistic(input, classes)
    } else {
        Architecture::mlp(input, rng.random_range(2..6), classes)
    };
    let n = rng.random_range(3..9);
    let features: Vec<f32> = (0..n * input).map(|_| rng.random_range(-2.0..2.0)).collect();
    let labels: Vec<u32> = (0..n).map(|i| (i % classes) as u32).collect();
    let data = ClientDataset::new(features, labels, input, classes).unwrap();
    let params: Vec<f64> = (0..arch.param_count()).map(|_| rng.random_range(-1.0..1.0)).collect();
    (arch, data, params)
}
