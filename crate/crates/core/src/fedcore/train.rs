use serde::{Deserialize, Serialize};

use super::data::{epoch_order, split_iid, ClientDataset};
use super::model::{loss_and_grad, Architecture};
use super::FedError;
use crate::codec::ParameterVector;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalModel {
    pub params: ParameterVector,
    pub architecture: Architecture,
    pub round: u32,
}

impl GlobalModel {
    pub fn new(architecture: Architecture, params: Vec<f32>, round: u32) -> Result<Self, FedError> {
        architecture.validate()?;
        if params.len() != architecture.param_count() {
            return Err(FedError::DimensionMismatch(format!(
                "{} parameters for an architecture of {}",
                params.len(),
                architecture.param_count()
            )));
        }
        Ok(Self {
            params: ParameterVector::from_flat(params)?,
            architecture,
            round,
        })
    }

    pub fn initialise(architecture: Architecture, seed: u64) -> Result<Self, FedError> {
        let params = architecture.init_params(&mut seed::derived_rng(seed, "model-init", &[]));
        Self::new(architecture, params, 0)
    }

    /// Same architecture, parameters replaced (shape checked).
    pub fn with_params(&self, params: ParameterVector, round: u32) -> Result<Self, FedError> {
        if params.shape() != self.params.shape() {
            return Err(FedError::DimensionMismatch(format!(
                "parameter shape {:?} does not match model shape {:?}",
                params.shape(),
                self.params.shape()
            )));
        }
        Ok(Self {
            params,
            architecture: self.architecture.clone(),
            round,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelUpdate {
    pub delta: ParameterVector,
    pub client_id: u32,
    pub round: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Optimizer {
    Sgd,
    AdamW {
        beta1: f32,
        beta2: f32,
        eps: f32,
        weight_decay: f32,
    },
}

impl Optimizer {
    pub fn adamw() -> Self {
        Optimizer::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub num_clients: usize,
    pub num_rounds: u32,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub optimizer: Optimizer,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// 10 clients, 10 rounds, batch 32 (the MNIST/MLP setting) with SGD at
    /// 1e-2, one local epoch per round.
    fn default() -> Self {
        Self {
            num_clients: 10,
            num_rounds: 10,
            local_epochs: 1,
            batch_size: 32,
            learning_rate: 1e-2,
            optimizer: Optimizer::Sgd,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// AdamW keeps the small constant learning rate of 1e-5.
    pub fn adamw_default() -> Self {
        Self {
            learning_rate: 1e-5,
            optimizer: Optimizer::adamw(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), FedError> {
        let fail = |m: &str| Err(FedError::InvalidConfig(m.to_string()));
        if self.num_clients == 0 {
            return fail("num_clients must be at least 1");
        }
        if self.num_rounds == 0 {
            return fail("num_rounds must be at least 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        // lr = 0 is accepted so a no-op training run can be expressed.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be finite and non-negative");
        }
        Ok(())
    }
}

/// Mean cross-entropy of the model over every sample in `data`.
pub fn forward_loss(model: &GlobalModel, data: &ClientDataset) -> Result<f64, FedError> {
    model.architecture.check_data(data)?;
    let params: Vec<f64> = model.params.values().iter().map(|&v| f64::from(v)).collect();
    let rows: Vec<usize> = (0..data.len()).collect();
    Ok(loss_and_grad(&model.architecture, &params, data, &rows, None))
}

/// Runs `cfg.local_epochs` of mini-batch training from `global` and returns
/// the parameter delta. Row order is reshuffled every epoch from
/// `client_rng_seed`; optimiser state starts fresh on every call.
pub fn local_train(
    global: &GlobalModel,
    data: &ClientDataset,
    cfg: &TrainConfig,
    client_id: u32,
    client_rng_seed: u64,
) -> Result<ModelUpdate, FedError> {
    cfg.validate()?;
    let arch = &global.architecture;
    arch.check_data(data)?;
    let start = global.params.values();
    let mut params = start.to_vec();
    let mut grad = vec![0.0f32; params.len()];
    let mut rng = seed::rng(client_rng_seed);
    let (mut m, mut v) = match cfg.optimizer {
        Optimizer::Sgd => (Vec::new(), Vec::new()),
        Optimizer::AdamW { .. } => (vec![0.0f32; params.len()], vec![0.0f32; params.len()]),
    };
    let lr = cfg.learning_rate;
    let mut step = 0usize;
    for _ in 0..cfg.local_epochs {
        let order = epoch_order(data.len(), &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            loss_and_grad(arch, &params, data, batch, Some(&mut grad));
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(FedError::NonFiniteGradient { step });
            }
            match cfg.optimizer {
                Optimizer::Sgd => {
                    for (p, g) in params.iter_mut().zip(&grad) {
                        *p -= lr * g;
                    }
                }
                Optimizer::AdamW {
                    beta1,
                    beta2,
                    eps,
                    weight_decay,
                } => {
                    let t = step as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..params.len() {
                        let g = grad[i];
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                        params[i] -= lr * weight_decay * params[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            if params.iter().any(|p| !p.is_finite()) {
                return Err(FedError::NonFiniteGradient { step });
            }
        }
    }
    let delta: Vec<f32> = params.iter().zip(start).map(|(&a, &b)| exact_delta(a, b)).collect();
    if delta.iter().any(|d| !d.is_finite()) {
        return Err(FedError::NonFiniteGradient { step });
    }
    Ok(ModelUpdate {
        delta: ParameterVector::new(global.params.shape().to_vec(), delta)?,
        client_id,
        round: global.round,
    })
}

/// `a - b` rounded to f32, nudged by an ulp when that lets the server's
/// `b + Δ` land back on `a` exactly.
fn exact_delta(a: f32, b: f32) -> f32 {
    let d = a - b;
    let lands = |d: f32| (f64::from(b) + f64::from(d)) as f32 == a;
    if !d.is_finite() || lands(d) {
        return d;
    }
    [d.next_up(), d.next_down()].into_iter().find(|&c| lands(c)).unwrap_or(d)
}

/// `θ + mean(Δ)` over the updates taken in ascending `client_id` order,
/// accumulated in `f64` and rounded once. The returned model is one round
/// further along.
pub fn aggregate(global: &GlobalModel, updates: &[ModelUpdate]) -> Result<GlobalModel, FedError> {
    if updates.is_empty() {
        return Err(FedError::EmptyVerifiedSet);
    }
    for u in updates {
        if u.round != global.round {
            return Err(FedError::RoundMismatch {
                global: global.round,
                update: u.round,
            });
        }
        if u.delta.shape() != global.params.shape() {
            return Err(FedError::DimensionMismatch(format!(
                "update from client {} has shape {:?}, model has {:?}",
                u.client_id,
                u.delta.shape(),
                global.params.shape()
            )));
        }
    }
    let mut ordered: Vec<&ModelUpdate> = updates.iter().collect();
    ordered.sort_by_key(|u| u.client_id);
    let mut sum = vec![0.0f64; global.params.len()];
    for u in ordered {
        for (s, &d) in sum.iter_mut().zip(u.delta.values()) {
            *s += f64::from(d);
        }
    }
    let n = updates.len() as f64;
    let params: Vec<f32> = global
        .params
        .values()
        .iter()
        .zip(&sum)
        .map(|(&p, &s)| (f64::from(p) + s / n) as f32)
        .collect();
    let params = ParameterVector::new(global.params.shape().to_vec(), params)?;
    global.with_params(params, global.round + 1)
}

/// Seed for client `client_id`'s local training in `round`.
pub fn client_train_seed(master: u64, round: u32, client_id: u32) -> u64 {
    seed::derive_seed(master, "local-train", &[u64::from(round), u64::from(client_id)])
}

/// Everything a run needs besides keys: the shards (client `i` owns
/// `shards[i - 1]`), the evaluation set and the initial model.
#[derive(Debug, Clone)]
pub struct FederatedSetup {
    pub cfg: TrainConfig,
    pub shards: Vec<ClientDataset>,
    pub eval: ClientDataset,
    pub initial: GlobalModel,
}

impl FederatedSetup {
    pub fn new(dataset: ClientDataset, architecture: Architecture, cfg: TrainConfig) -> Result<Self, FedError> {
        cfg.validate()?;
        architecture.check_data(&dataset)?;
        let shards = split_iid(&dataset, cfg.num_clients, seed::derive_seed(cfg.seed, "split", &[]))?;
        let initial = GlobalModel::initialise(architecture, seed::derive_seed(cfg.seed, "init", &[]))?;
        Ok(Self {
            cfg,
            shards,
            eval: dataset,
            initial,
        })
    }

    pub fn client_ids(&self) -> impl Iterator<Item = u32> {
        1..=self.shards.len() as u32
    }

    pub fn shard(&self, client_id: u32) -> &ClientDataset {
        &self.shards[client_id as usize - 1]
    }
}

/// FedAvg with no signatures, no codec and no channel: the reference the
/// secured protocol is checked against. Only `participants` train and are
/// aggregated. Returns the final model and the loss after each round.
pub fn plain_fedavg(setup: &FederatedSetup, participants: &[u32]) -> Result<(GlobalModel, Vec<f64>), FedError> {
    let mut model = setup.initial.clone();
    let mut losses = Vec::with_capacity(setup.cfg.num_rounds as usize);
    for round in 0..setup.cfg.num_rounds {
        let updates = participants
            .iter()
            .map(|&id| {
                local_train(
                    &model,
                    setup.shard(id),
                    &setup.cfg,
                    id,
                    client_train_seed(setup.cfg.seed, round, id),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        model = aggregate(&model, &updates)?;
        losses.push(forward_loss(&model, &setup.eval)?);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fedcore::{synthetic, SyntheticSpec};
    use proptest::prelude::*;

    fn small_setup(clients: usize) -> FederatedSetup {
        let data = synthetic(&SyntheticSpec {
            num_samples: 200,
            num_features: 6,
            num_classes: 3,
            separation: 1.5,
            seed: 5,
        })
        .unwrap();
        let cfg = TrainConfig {
            num_clients: clients,
            num_rounds: 4,
            batch_size: 16,
            seed: 21,
            ..TrainConfig::default()
        };
        FederatedSetup::new(data, Architecture::mlp(6, 8, 3), cfg).unwrap()
    }

    fn update(client_id: u32, values: Vec<f32>) -> ModelUpdate {
        ModelUpdate {
            delta: ParameterVector::from_flat(values).unwrap(),
            client_id,
            round: 0,
        }
    }

    fn flat_model(values: Vec<f32>) -> GlobalModel {
        let arch = Architecture::logistic(values.len() - 1, 1);
        GlobalModel::new(arch, values, 0).unwrap()
    }

    #[test]
    fn zero_learning_rate_gives_zero_delta() {
        let s = small_setup(2);
        let cfg = TrainConfig { learning_rate: 0.0, ..s.cfg.clone() };
        let u = local_train(&s.initial, s.shard(1), &cfg, 1, 3).unwrap();
        assert!(u.delta.values().iter().all(|&d| d == 0.0));
    }

    #[test]
    fn local_train_is_deterministic_and_pure() {
        let s = small_setup(2);
        let before = s.initial.clone();
        let a = local_train(&s.initial, s.shard(1), &s.cfg, 1, 77).unwrap();
        let b = local_train(&s.initial, s.shard(1), &s.cfg, 1, 77).unwrap();
        assert!(a.delta.bit_eq(&b.delta));
        assert_eq!(s.initial, before);
        let c = local_train(&s.initial, s.shard(1), &s.cfg, 1, 78).unwrap();
        assert!(!a.delta.bit_eq(&c.delta));
    }

    #[test]
    fn adamw_trains_and_is_deterministic() {
        let s = small_setup(1);
        let cfg = TrainConfig { learning_rate: 1e-3, optimizer: Optimizer::adamw(), ..s.cfg.clone() };
        let a = local_train(&s.initial, s.shard(1), &cfg, 1, 4).unwrap();
        let b = local_train(&s.initial, s.shard(1), &cfg, 1, 4).unwrap();
        assert!(a.delta.bit_eq(&b.delta));
        assert!(a.delta.values().iter().any(|&d| d != 0.0));
        let after = aggregate(&s.initial, &[a]).unwrap();
        assert!(forward_loss(&after, &s.eval).unwrap() < forward_loss(&s.initial, &s.eval).unwrap());
    }

    #[test]
    fn divergence_is_reported() {
        let s = small_setup(1);
        let cfg = TrainConfig { learning_rate: 1e30, ..s.cfg.clone() };
        assert!(matches!(
            local_train(&s.initial, s.shard(1), &cfg, 1, 4),
            Err(FedError::NonFiniteGradient { .. })
        ));
    }

    #[test]
    fn dimension_mismatch() {
        let s = small_setup(1);
        let other = synthetic(&SyntheticSpec { num_samples: 10, num_features: 4, num_classes: 3, ..Default::default() }).unwrap();
        assert!(matches!(forward_loss(&s.initial, &other), Err(FedError::DimensionMismatch(_))));
        assert!(matches!(local_train(&s.initial, &other, &s.cfg, 1, 0), Err(FedError::DimensionMismatch(_))));
    }

    #[test]
    fn identical_updates_move_by_that_update() {
        let g = flat_model(vec![0.5, -1.25, 3.0]);
        let u = vec![0.25f32, 0.5, -0.125];
        let ups: Vec<_> = (1..=5).map(|i| update(i, u.clone())).collect();
        let next = aggregate(&g, &ups).unwrap();
        let expected: Vec<f32> = g.params.values().iter().zip(&u).map(|(a, b)| a + b).collect();
        assert_eq!(next.params.values(), expected.as_slice());
        assert_eq!(next.round, 1);
    }

    #[test]
    fn opposite_updates_cancel() {
        let g = flat_model(vec![0.1, 0.2, 0.3]);
        let v = vec![0.7f32, -0.3, 1e-3];
        let neg: Vec<f32> = v.iter().map(|x| -x).collect();
        let next = aggregate(&g, &[update(1, v), update(2, neg)]).unwrap();
        assert!(next.params.bit_eq(&g.params));
    }

    #[test]
    fn seven_of_ten_matches_scalar_loop() {
        let g = flat_model(vec![0.3, -0.7, 0.05, 2.0]);
        let mut rng = seed::rng(9);
        let all: Vec<ModelUpdate> = (1..=10)
            .map(|i| update(i, (0..4).map(|_| rand::Rng::random_range(&mut rng, -1.0f32..1.0)).collect()))
            .collect();
        let kept: Vec<ModelUpdate> = all.into_iter().filter(|u| ![2, 5, 9].contains(&u.client_id)).collect();
        assert_eq!(kept.len(), 7);
        let next = aggregate(&g, &kept).unwrap();

        let mut expected = Vec::new();
        for j in 0..4 {
            let mut s = 0.0f64;
            for id in [1u32, 3, 4, 6, 7, 8, 10] {
                let u = kept.iter().find(|u| u.client_id == id).unwrap();
                s += u.delta.values()[j] as f64;
            }
            expected.push((g.params.values()[j] as f64 + s / 7.0) as f32);
        }
        assert_eq!(next.params.values(), expected.as_slice());
    }

    #[test]
    fn aggregate_errors() {
        let g = flat_model(vec![0.0, 0.0]);
        assert_eq!(aggregate(&g, &[]), Err(FedError::EmptyVerifiedSet));
        let mut u = update(1, vec![1.0, 1.0]);
        u.round = 3;
        assert_eq!(aggregate(&g, &[u]), Err(FedError::RoundMismatch { global: 0, update: 3 }));
        assert!(matches!(aggregate(&g, &[update(1, vec![1.0])]), Err(FedError::DimensionMismatch(_))));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { num_clients: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { num_rounds: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..Default::default() }.validate().is_err());
        let adam = TrainConfig::adamw_default();
        assert_eq!(adam.learning_rate, 1e-5);
        assert_eq!(
            adam.optimizer,
            Optimizer::AdamW { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
        );
    }

    #[test]
    fn plain_fedavg_reduces_loss() {
        let s = small_setup(4);
        let ids: Vec<u32> = s.client_ids().collect();
        let (model, losses) = plain_fedavg(&s, &ids).unwrap();
        assert_eq!(losses.len(), 4);
        assert_eq!(model.round, 4);
        assert!(losses[3] < losses[0]);
    }

    #[test]
    fn global_loss_is_mean_of_client_losses_on_even_shards() {
        let s = small_setup(4);
        assert!(s.shards.iter().all(|sh| sh.len() == 50));
        let global = forward_loss(&s.initial, &s.eval).unwrap();
        let mean: f64 = s.shards.iter().map(|sh| forward_loss(&s.initial, sh).unwrap()).sum::<f64>() / 4.0;
        assert!((global - mean).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn aggregation_is_permutation_invariant(
            deltas in prop::collection::vec(prop::collection::vec(-10.0f32..10.0, 3), 1..8),
            seed in any::<u64>(),
        ) {
            let g = flat_model(vec![0.5, -0.5, 1.0]);
            let ups: Vec<ModelUpdate> = deltas.into_iter().enumerate().map(|(i, d)| update(i as u32 + 1, d)).collect();
            let mut shuffled = ups.clone();
            rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut seed::rng(seed));
            let a = aggregate(&g, &ups).unwrap();
            let b = aggregate(&g, &shuffled).unwrap();
            prop_assert!(a.params.bit_eq(&b.params));
        }
    }
}
