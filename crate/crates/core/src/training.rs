//! Gaussian-NLL training over one-step pairs with an 80:20 split,
//! checkpointing and saturation-based stopping.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::integrator::StepPairDataset;
use crate::models::{
    bfgn_node_inputs, bfgn_on_tape, bnn_on_tape, graph_model_on_tape, init_params, nn_on_tape,
    stage_params, GraphTopology, ModelFamily, ModelParams, ParamCursor, GAMMA_FLOOR,
};
use crate::rng::{derive_seed, derive_seed_indexed, rng_for, NoiseStream};
use crate::systems::SystemSpec;
use crate::tensor::{adam_step, AdamState, Array, Tape, VarId};

/// Training hyperparameters. Defaults reproduce the benchmark protocol:
/// Adam at 1e-3, batch size 20, 80:20 split, stop when the best validation
/// loss fails to improve by 1e-3 over 100 epochs.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_improvement: f64,
    pub split: f64,
    pub seed: u64,
    /// Ablation: sample the stochastic term inside the training forward pass
    /// instead of letting the NLL's sigma absorb it.
    pub sample_noise_in_training: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 20,
            lambda: 1.0,
            epsilon: 1e-6,
            max_epochs: 10_000,
            patience: 100,
            min_improvement: 1e-3,
            split: 0.8,
            seed: 0,
            sample_noise_in_training: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.split > 0.0 && self.split < 1.0) {
            return Err(Error::Parameter(format!(
                "split must be in (0, 1), got {}",
                self.split
            )));
        }
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::Parameter("epsilon must be > 0".to_string()));
        }
        if !self.lambda.is_finite() || self.lambda <= 0.0 {
            return Err(Error::Parameter("lambda must be > 0".to_string()));
        }
        if self.batch_size == 0 {
            return Err(Error::Parameter("batch_size must be >= 1".to_string()));
        }
        Ok(())
    }
}

/// Per-epoch mean train/validation losses (per pair).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// Resumable training state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub opt_state: AdamState,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochStats>,
}

/// Outcome of a training run: the best-validation parameters plus the final
/// state for resuming.
#[derive(Clone, Debug)]
pub struct TrainResult {
    pub best_params: ModelParams,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochStats>,
    pub last: Checkpoint,
}

/// Gaussian negative log-likelihood of targets under per-particle normals:
///
/// `(1/N) sum_i sum_pairs sum_coord [ log max(s_i^2, eps)
/// + lambda (x - x_hat)^2 / max(s_i^2, eps) ]`
///
/// with `N` the particle count. The per-coordinate sum applies to the log
/// term as well, which makes the sigma head's optimum the per-coordinate
/// residual variance.
///
/// `x_true`/`x_pred` are `[B, n, 3]` (or `[n, 3]`), `sigma_hat` is `[n]`.
pub fn gaussian_nll_loss(
    x_true: &Array,
    x_pred: &Array,
    sigma_hat: &Array,
    lambda: f64,
    epsilon: f64,
) -> Result<f64> {
    if x_true.shape() != x_pred.shape() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_nll_loss",
            left: x_true.shape().to_vec(),
            right: x_pred.shape().to_vec(),
        });
    }
    if !x_true.all_finite() || !x_pred.all_finite() || !sigma_hat.all_finite() {
        return Err(Error::NonFinite("loss inputs".to_string()));
    }
    let n = sigma_hat.len();
    if n == 0 || !x_true.len().is_multiple_of(3 * n) {
        return Err(Error::ShapeMismatch {
            op: "gaussian_nll_loss",
            left: x_true.shape().to_vec(),
            right: sigma_hat.shape().to_vec(),
        });
    }
    let pairs = x_true.len() / (3 * n);
    let mut total = 0.0;
    for b in 0..pairs {
        for i in 0..n {
            let s2 = (sigma_hat.data()[i] * sigma_hat.data()[i]).max(epsilon);
            let log_term = s2.ln();
            for c in 0..3 {
                let k = (b * n + i) * 3 + c;
                let r = x_true.data()[k] - x_pred.data()[k];
                total += log_term + lambda * r * r / s2;
            }
        }
    }
    Ok(total / n as f64)
}

/// The same NLL assembled on a tape from prediction variables.
///
/// `x_true` is a constant leaf `[rows, 3]`, `mean_pred` the predicted mean
/// `[rows, 3]`, `sigma2` the per-row variance column `[rows, 1]`.
pub(crate) fn nll_on_tape(
    tape: &mut Tape,
    x_true: VarId,
    mean_pred: VarId,
    sigma2: VarId,
    lambda: f64,
    epsilon: f64,
    n_particles: usize,
) -> Result<VarId> {
    let s2 = tape.max_scalar(sigma2, epsilon);
    let log_term = tape.log(s2);
    let log_bc = tape.broadcast_cols(log_term, 3)?;
    let residual = tape.sub(x_true, mean_pred)?;
    let sq = tape.mul(residual, residual)?;
    let s2_bc = tape.broadcast_cols(s2, 3)?;
    let ratio = tape.div(sq, s2_bc)?;
    let weighted = tape.mul_scalar(ratio, lambda);
    let per_elem = tape.add(log_bc, weighted)?;
    let total = tape.sum(per_elem);
    Ok(tape.mul_scalar(total, 1.0 / n_particles as f64))
}

/// Forward pass plus loss for one batch, on one tape. Returns the loss id
/// and the staged parameter ids (in storage order).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batch_loss_on_tape(
    tape: &mut Tape,
    params: &ModelParams,
    spec: &SystemSpec,
    topology: Option<&GraphTopology>,
    inputs: &Array,
    targets: &Array,
    velocities: &Array,
    cfg: &TrainConfig,
    noise: Option<&Array>,
) -> Result<(VarId, Vec<VarId>)> {
    let n = spec.n_particles;
    let rows = inputs.rows();
    if !rows.is_multiple_of(n) {
        return Err(Error::ShapeMismatch {
            op: "batch_loss",
            left: inputs.shape().to_vec(),
            right: vec![n, 3],
        });
    }
    let batch = rows / n;
    let ids = stage_params(tape, params);
    let mut cursor = ParamCursor::new(&ids);
    let x_const = tape.leaf(inputs.clone());
    let target_const = tape.leaf(targets.clone());

    let loss = match params.family {
        ModelFamily::Nn => {
            let x_flat = tape.reshape(x_const, vec![batch, 3 * n])?;
            let next_flat = nn_on_tape(tape, &mut cursor, &params.arch, x_flat)?;
            let mean_pred = tape.reshape(next_flat, vec![rows, 3])?;
            // No sigma head: unit variance reduces the NLL to a squared error.
            let sigma2 = tape.leaf(Array::ones(vec![rows, 1]));
            nll_on_tape(
                tape,
                target_const,
                mean_pred,
                sigma2,
                cfg.lambda,
                cfg.epsilon,
                n,
            )?
        }
        family => {
            let owned_topo;
            let (forces, gamma) = match family {
                ModelFamily::BroGnet | ModelFamily::BdGnn | ModelFamily::BFgn => {
                    let topo = match topology {
                        Some(t) => t,
                        None => {
                            owned_topo = GraphTopology::batched(spec, batch);
                            &owned_topo
                        }
                    };
                    let graph = topo.with_positions(inputs);
                    let edge_feat = tape.leaf(graph.edge_features.clone());
                    if family == ModelFamily::BFgn {
                        let node_in =
                            tape.leaf(bfgn_node_inputs(&graph, inputs, velocities)?);
                        bfgn_on_tape(
                            tape,
                            &mut cursor,
                            &params.arch,
                            &graph,
                            node_in,
                            edge_feat,
                        )?
                    } else {
                        let onehot = tape.leaf(graph.node_types.clone());
                        graph_model_on_tape(
                            tape,
                            &mut cursor,
                            family,
                            &params.arch,
                            &graph,
                            onehot,
                            edge_feat,
                        )?
                    }
                }
                ModelFamily::Bnn => {
                    let x_flat = tape.reshape(x_const, vec![batch, 3 * n])?;
                    bnn_on_tape(tape, &mut cursor, &params.arch, n, x_flat)?
                }
                ModelFamily::Nn => unreachable!(),
            };
            // Euler-Maruyama transition mean and variance from the prediction:
            // mean = x + (F/gamma) dt, var = 2 kBT dt / gamma.
            let gamma_f = tape.max_scalar(gamma, GAMMA_FLOOR);
            let inv_gamma = tape.recip(gamma_f);
            let inv_bc = tape.broadcast_cols(inv_gamma, 3)?;
            let mobility = tape.mul(forces, inv_bc)?;
            let drift = tape.mul_scalar(mobility, spec.dt);
            let mut mean_pred = tape.add(x_const, drift)?;
            let sigma2 = tape.mul_scalar(inv_gamma, 2.0 * spec.kbt * spec.dt);
            if let Some(w) = noise {
                let s2c = tape.max_scalar(sigma2, cfg.epsilon);
                let sigma = tape.sqrt(s2c);
                let sigma_bc = tape.broadcast_cols(sigma, 3)?;
                let w_const = tape.leaf(w.clone());
                let kick = tape.mul(sigma_bc, w_const)?;
                mean_pred = tape.add(mean_pred, kick)?;
            }
            nll_on_tape(
                tape,
                target_const,
                mean_pred,
                sigma2,
                cfg.lambda,
                cfg.epsilon,
                n,
            )?
        }
    };
    Ok((loss, ids))
}

/// One optimizer update on a batch of pair indices. Returns the batch loss
/// as a per-pair mean.
pub fn train_step(
    params: &mut ModelParams,
    opt_state: &mut AdamState,
    dataset: &StepPairDataset,
    batch_idx: &[usize],
    cfg: &TrainConfig,
    noise: Option<&Array>,
) -> Result<f64> {
    train_step_inner(params, opt_state, dataset, batch_idx, cfg, noise, None)
}

fn train_step_inner(
    params: &mut ModelParams,
    opt_state: &mut AdamState,
    dataset: &StepPairDataset,
    batch_idx: &[usize],
    cfg: &TrainConfig,
    noise: Option<&Array>,
    topology: Option<&GraphTopology>,
) -> Result<f64> {
    let spec = &dataset.spec;
    let (inputs, targets, velocities) = dataset.gather_batch(batch_idx);
    let mut tape = Tape::new();
    let (loss, ids) = batch_loss_on_tape(
        &mut tape,
        params,
        spec,
        topology,
        &inputs,
        &targets,
        &velocities,
        cfg,
        noise,
    )?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Training(format!(
            "non-finite loss on batch starting at pair {}",
            batch_idx.first().copied().unwrap_or(0)
        )));
    }
    let mut grads = tape.backward(loss)?;
    let grad_arrays: Vec<Array> = ids.iter().map(|&id| grads.take(id, &tape)).collect();
    adam_step(params.values_mut(), &grad_arrays, opt_state, cfg.lr)?;
    Ok(loss_value / batch_idx.len() as f64)
}

/// Reverse-mode gradients of the batch loss with respect to every parameter
/// array, in storage order.
pub fn loss_gradients(
    params: &ModelParams,
    dataset: &StepPairDataset,
    batch_idx: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<Array>> {
    let (inputs, targets, velocities) = dataset.gather_batch(batch_idx);
    let mut tape = Tape::new();
    let (loss, ids) = batch_loss_on_tape(
        &mut tape,
        params,
        &dataset.spec,
        None,
        &inputs,
        &targets,
        &velocities,
        cfg,
        None,
    )?;
    let mut grads = tape.backward(loss)?;
    Ok(ids.iter().map(|&id| grads.take(id, &tape)).collect())
}

/// Mean per-pair NLL of `params` over the given pair indices, without
/// touching the parameters.
pub fn dataset_loss(
    params: &ModelParams,
    dataset: &StepPairDataset,
    idx: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let spec = &dataset.spec;
    let mut total = 0.0;
    for chunk in idx.chunks(512) {
        let (inputs, targets, velocities) = dataset.gather_batch(chunk);
        let mut tape = Tape::inference();
        let (loss, _) = batch_loss_on_tape(
            &mut tape,
            params,
            spec,
            None,
            &inputs,
            &targets,
            &velocities,
            cfg,
            None,
        )?;
        total += tape.value(loss).item();
    }
    Ok(total / idx.len() as f64)
}

/// Deterministic split of pair indices into train/validation; a pure
/// function of `(dataset length, split, seed)`.
pub fn split_indices(len: usize, split: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = rng_for(seed, "split");
    idx.shuffle(&mut rng);
    let cut = (((len as f64) * split).round() as usize).clamp(1, len.max(2) - 1);
    let val = idx.split_off(cut.min(len));
    (idx, val)
}

/// Trains a fresh model of `family`. See [`TrainResult`].
pub fn fit(
    family: ModelFamily,
    spec: &SystemSpec,
    dataset: &StepPairDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    fit_inner(family, spec, dataset, cfg, None, |_, _| {})
}

/// Like [`fit`], invoking `observer(epoch, params)` after every epoch.
pub fn fit_observed(
    family: ModelFamily,
    spec: &SystemSpec,
    dataset: &StepPairDataset,
    cfg: &TrainConfig,
    observer: impl FnMut(usize, &ModelParams),
) -> Result<TrainResult> {
    fit_inner(family, spec, dataset, cfg, None, observer)
}

/// Continues training from a checkpoint under the same seed schedule; the
/// loss trajectory matches an uninterrupted run.
pub fn fit_resume(
    checkpoint: Checkpoint,
    spec: &SystemSpec,
    dataset: &StepPairDataset,
    cfg: &TrainConfig,
) -> Result<TrainResult> {
    let family = checkpoint.params.family;
    fit_inner(family, spec, dataset, cfg, Some(checkpoint), |_, _| {})
}

fn fit_inner(
    family: ModelFamily,
    spec: &SystemSpec,
    dataset: &StepPairDataset,
    cfg: &TrainConfig,
    start: Option<Checkpoint>,
    mut observer: impl FnMut(usize, &ModelParams),
) -> Result<TrainResult> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Parameter("dataset is empty".to_string()));
    }
    if dataset.spec.n_particles != spec.n_particles {
        return Err(Error::Parameter(format!(
            "dataset was generated for n={}, spec has n={}",
            dataset.spec.n_particles, spec.n_particles
        )));
    }
    let (train_idx, val_idx) = split_indices(dataset.len(), cfg.split, cfg.seed);

    let (mut params, mut opt_state, start_epoch, mut history) = match start {
        Some(ckpt) => {
            if ckpt.params.family != family {
                return Err(Error::Capability {
                    family: ckpt.params.family.tag(),
                    reason: format!("checkpoint family does not match {}", family.tag()),
                });
            }
            (ckpt.params, ckpt.opt_state, ckpt.epoch, ckpt.history)
        }
        None => {
            let params = init_params(family, spec, derive_seed(cfg.seed, "model-init"));
            let opt_state = AdamState::new(params.values());
            (params, opt_state, 0, Vec::new())
        }
    };

    let topology = GraphTopology::batched(spec, cfg.batch_size);

    // Rebuild saturation tracking from history so resumed runs stop at the
    // same epoch an uninterrupted run would.
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_params = params.clone();
    let mut milestone_val = f64::INFINITY;
    let mut milestone_epoch = 0;
    for h in &history {
        if h.val_loss < best_val {
            best_val = h.val_loss;
            best_epoch = h.epoch;
        }
        if h.val_loss < milestone_val - cfg.min_improvement {
            milestone_val = h.val_loss;
            milestone_epoch = h.epoch;
        }
    }

    let noise_stream = NoiseStream::new(derive_seed(cfg.seed, "train-noise"));
    let n = spec.n_particles;

    let mut epoch = start_epoch;
    while epoch < cfg.max_epochs {
        let mut order = train_idx.clone();
        let mut rng = rng_for(derive_seed_indexed(cfg.seed, "shuffle", epoch as u64), "epoch");
        order.shuffle(&mut rng);

        let mut train_total = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let noise_draw;
            let noise = if cfg.sample_noise_in_training {
                noise_draw = noise_stream.step_normals(epoch as u64, b as u64, batch.len() * n);
                Some(&noise_draw)
            } else {
                None
            };
            let topo = (batch.len() == cfg.batch_size).then_some(&topology);
            let loss =
                train_step_inner(&mut params, &mut opt_state, dataset, batch, cfg, noise, topo)?;
            train_total += loss * batch.len() as f64;
        }
        let train_loss = train_total / train_idx.len() as f64;
        let val_loss = if val_idx.is_empty() {
            train_loss
        } else {
            dataset_loss(&params, dataset, &val_idx, cfg)?
        };
        history.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        observer(epoch, &params);

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_params = params.clone();
        }
        if val_loss < milestone_val - cfg.min_improvement {
            milestone_val = val_loss;
            milestone_epoch = epoch;
        }
        epoch += 1;
        if epoch - milestone_epoch > cfg.patience {
            break;
        }
    }

    Ok(TrainResult {
        best_params,
        best_epoch,
        best_val_loss: best_val,
        history: history.clone(),
        last: Checkpoint {
            params,
            opt_state,
            epoch,
            history,
        },
    })
}
