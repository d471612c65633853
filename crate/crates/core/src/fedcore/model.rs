//! Fully connected classifier with ReLU hidden layers and a softmax
//! cross-entropy head. No hidden layers gives multinomial logistic
//! regression.
//!
//! Parameters are one flat vector: for each layer the weight matrix
//! (`out x in`, row-major) followed by the bias. The math is generic over
//! the float type so the same code can be evaluated in `f64` when checking
//! gradients.

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::ClientDataset;
use super::FedError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl Architecture {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: Vec::new(),
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            hidden_dims: vec![hidden],
            num_classes,
        }
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_dims.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_dims);
        w.push(self.num_classes);
        w
    }

    /// `(inputs, outputs)` for each layer.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        self.widths().windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|&(i, o)| o * i + o).sum()
    }

    pub fn validate(&self) -> Result<(), FedError> {
        if self.widths().contains(&0) {
            return Err(FedError::DimensionMismatch(format!(
                "architecture has a zero-width layer: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn check_data(&self, data: &ClientDataset) -> Result<(), FedError> {
        if data.num_features() != self.input_dim || data.num_classes() != self.num_classes {
            return Err(FedError::DimensionMismatch(format!(
                "model expects {} features / {} classes, data has {} / {}",
                self.input_dim,
                self.num_classes,
                data.num_features(),
                data.num_classes()
            )));
        }
        Ok(())
    }

    /// PyTorch-style uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights
    /// and biases.
    pub fn init_params<R: Rng>(&self, rng: &mut R) -> Vec<f32> {
        let mut params = Vec::with_capacity(self.param_count());
        for (fan_in, out) in self.layers() {
            let bound = 1.0 / (fan_in as f32).sqrt();
            for _ in 0..(out * fan_in + out) {
                params.push(rng.random_range(-bound..bound));
            }
        }
        params
    }
}

fn cast<F: Float>(x: f32) -> F {
    F::from(x).expect("f32 fits any Float")
}

/// Mean cross-entropy over `rows` of `data`; when `grad` is given it is
/// overwritten with the gradient of that mean.
pub fn loss_and_grad<F: Float>(
    arch: &Architecture,
    params: &[F],
    data: &ClientDataset,
    rows: &[usize],
    mut grad: Option<&mut [F]>,
) -> F {
    let layers = arch.layers();
    debug_assert_eq!(params.len(), arch.param_count());
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|v| *v = F::zero());
    }
    if rows.is_empty() {
        return F::zero();
    }
    let inv_n = F::one() / F::from(rows.len()).expect("row count fits");

    // Per-layer pre-activations and activations, reused across samples.
    let mut acts: Vec<Vec<F>> = Vec::with_capacity(layers.len() + 1);
    acts.push(vec![F::zero(); arch.input_dim]);
    let mut pre: Vec<Vec<F>> = Vec::with_capacity(layers.len());
    for &(_, out) in &layers {
        pre.push(vec![F::zero(); out]);
        acts.push(vec![F::zero(); out]);
    }
    let mut delta: Vec<F> = Vec::new();
    let mut delta_prev: Vec<F> = Vec::new();
    let mut total = F::zero();

    for &r in rows {
        for (a, &x) in acts[0].iter_mut().zip(data.row(r)) {
            *a = cast(x);
        }
        let mut offset = 0;
        for (l, &(fan_in, out)) in layers.iter().enumerate() {
            let w = &params[offset..offset + out * fan_in];
            let b = &params[offset + out * fan_in..offset + out * fan_in + out];
            let last = l + 1 == layers.len();
            let (input, rest) = acts.split_at_mut(l + 1);
            let input = &input[l];
            for o in 0..out {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                let mut z = b[o];
                for (wi, xi) in row.iter().zip(input) {
                    z = z + *wi * *xi;
                }
                pre[l][o] = z;
                rest[0][o] = if last || z > F::zero() { z } else { F::zero() };
            }
            offset += out * fan_in + out;
        }

        let logits = &pre[layers.len() - 1];
        let max = logits.iter().fold(F::neg_infinity(), |m, &z| m.max(z));
        let sum_exp = logits.iter().fold(F::zero(), |s, &z| s + (z - max).exp());
        let log_z = max + sum_exp.ln();
        let label = data.label(r) as usize;
        total = total + (log_z - logits[label]);

        let Some(g) = grad.as_deref_mut() else { continue };

        delta.clear();
        delta.extend(logits.iter().map(|&z| (z - log_z).exp() * inv_n));
        delta[label] = delta[label] - inv_n;

        let mut offset = arch.param_count();
        for l in (0..layers.len()).rev() {
            let (fan_in, out) = layers[l];
            offset -= out * fan_in + out;
            let input = &acts[l];
            let (gw, gb) = g[offset..offset + out * fan_in + out].split_at_mut(out * fan_in);
            for o in 0..out {
                let d = delta[o];
                gb[o] = gb[o] + d;
                for (gwi, xi) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(input) {
                    *gwi = *gwi + d * *xi;
                }
            }
            if l == 0 {
                break;
            }
            let w = &params[offset..offset + out * fan_in];
            delta_prev.clear();
            delta_prev.resize(fan_in, F::zero());
            for o in 0..out {
                let d = delta[o];
                for (dp, wi) in delta_prev.iter_mut().zip(&w[o * fan_in..(o + 1) * fan_in]) {
                    *dp = *dp + d * *wi;
                }
            }
            for (dp, &z) in delta_prev.iter_mut().zip(&pre[l - 1]) {
                if z <= F::zero() {
                    *dp = F::zero();
                }
            }
            std::mem::swap(&mut delta, &mut delta_prev);
        }
    }
    total * inv_n
}

/// Predicted class for row `r`.
pub fn predict(arch: &Architecture, params: &[f32], data: &ClientDataset, r: usize) -> usize {
    let mut a: Vec<f32> = data.row(r).to_vec();
    let mut offset = 0;
    let layers = arch.layers();
    for (l, &(fan_in, out)) in layers.iter().enumerate() {
        let w = &params[offset..offset + out * fan_in];
        let b = &params[offset + out * fan_in..offset + out * fan_in + out];
        let last = l + 1 == layers.len();
        a = (0..out)
            .map(|o| {
                let z = b[o]
                    + w[o * fan_in..(o + 1) * fan_in]
                        .iter()
                        .zip(&a)
                        .map(|(wi, xi)| wi * xi)
                        .sum::<f32>();
                if last { z } else { z.max(0.0) }
            })
            .collect();
        offset += out * fan_in + out;
    }
    a.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
