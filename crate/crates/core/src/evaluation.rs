//! Position, Brownian and KL roll-out metrics over trajectory ensembles,
//! plus the evaluation and zero-shot generalization protocols.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrator::{
    random_initial_condition, rollout, BrownianDynamics, GroundTruthDynamics, TrajectoryEnsemble,
};
use crate::models::{nn_forward, LearnedDynamics, ModelFamily, ModelParams};
use crate::rng::{derive_seed, derive_seed_indexed, NoiseStream};
use crate::systems::{ground_truth_sigma, SystemSpec};
use crate::tensor::Array;

/// Coordinates whose ground-truth ensemble std falls below this are treated
/// as degenerate.
pub const DEGENERATE_STD: f64 = 1e-12;

/// Mean and unbiased std per `(step, particle, coordinate)` across the
/// trajectories of an ensemble.
#[derive(Clone, Debug)]
pub struct EnsembleStats {
    pub n_steps: usize,
    pub n_particles: usize,
    /// `[steps+1, n, 3]`
    pub mean: Array,
    /// `[steps+1, n, 3]`
    pub std: Array,
    pub n_trajectories: usize,
}

impl EnsembleStats {
    pub fn compute(ensemble: &TrajectoryEnsemble) -> Result<EnsembleStats> {
        let shape = ensemble.positions.shape();
        let (n_traj, steps1, n) = (shape[0], shape[1], shape[2]);
        if n_traj < 2 {
            return Err(Error::Degenerate(
                "ensemble statistics need at least 2 trajectories".to_string(),
            ));
        }
        let mut mean = Array::zeros(vec![steps1, n, 3]);
        let mut std = Array::zeros(vec![steps1, n, 3]);
        let stride = steps1 * n * 3;
        let data = ensemble.positions.data();
        for k in 0..stride {
            let mut s = 0.0;
            let mut s2 = 0.0;
            for t in 0..n_traj {
                let v = data[t * stride + k];
                s += v;
                s2 += v * v;
            }
            let m = s / n_traj as f64;
            let var = (s2 - s * m).max(0.0) / (n_traj - 1) as f64;
            mean.data_mut()[k] = m;
            std.data_mut()[k] = var.sqrt();
        }
        Ok(EnsembleStats {
            n_steps: steps1 - 1,
            n_particles: n,
            mean,
            std,
            n_trajectories: n_traj,
        })
    }

    #[inline]
    fn at(a: &Array, step: usize, particle: usize, n: usize) -> &[f64] {
        let base = (step * n + particle) * 3;
        &a.data()[base..base + 3]
    }

    pub fn mean_at(&self, step: usize, particle: usize) -> &[f64] {
        Self::at(&self.mean, step, particle, self.n_particles)
    }

    pub fn std_at(&self, step: usize, particle: usize) -> &[f64] {
        Self::at(&self.std, step, particle, self.n_particles)
    }
}

/// Ground-truth-std-normalized Euclidean distance between ensemble-mean
/// positions of one particle at one step:
/// `sqrt(sum_c ((mean_gt - mean_pred) / std_gt)^2)`.
///
/// Coordinates with degenerate ground-truth std are skipped and counted in
/// the second return value.
pub fn position_error(
    gt: &EnsembleStats,
    pred_mean: &[f64],
    step: usize,
    particle: usize,
) -> (f64, usize) {
    let mu = gt.mean_at(step, particle);
    let sd = gt.std_at(step, particle);
    let mut total = 0.0;
    let mut skipped = 0;
    for c in 0..3 {
        if sd[c] < DEGENERATE_STD {
            skipped += 1;
            continue;
        }
        let z = (mu[c] - pred_mean[c]) / sd[c];
        total += z * z;
    }
    (total.sqrt(), skipped)
}

/// RMSE over particles between predicted and true process-level stds
/// `sqrt(2 gamma kBT)`.
pub fn brownian_error(gamma_hat: &Array, spec: &SystemSpec) -> f64 {
    let n = spec.n_particles;
    debug_assert_eq!(gamma_hat.len(), n);
    let mut sq = 0.0;
    for i in 0..n {
        let predicted = (2.0 * gamma_hat.data()[i] * spec.kbt).sqrt();
        let truth = ground_truth_sigma(spec, i);
        sq += (predicted - truth) * (predicted - truth);
    }
    (sq / n as f64).sqrt()
}

/// KL divergence between two univariate normals, `D_KL(pred || gt)`:
/// `ln(s1/s0) + (s0^2 + (m0 - m1)^2) / (2 s1^2) - 1/2`
/// with `(m0, s0)` the predicted fit and `(m1, s1)` the ground-truth fit.
pub fn normal_kl(mu0: f64, sigma0: f64, mu1: f64, sigma1: f64) -> Result<f64> {
    if sigma1 < DEGENERATE_STD {
        return Err(Error::Degenerate(format!(
            "ground-truth std {sigma1:e} too small for a KL fit"
        )));
    }
    // A collapsed predicted distribution (e.g. a deterministic baseline) is
    // floored rather than sent to infinity so reports stay finite.
    let s0 = sigma0.max(DEGENERATE_STD);
    let d = mu0 - mu1;
    Ok((sigma1 / s0).ln() + (s0 * s0 + d * d) / (2.0 * sigma1 * sigma1) - 0.5)
}

/// Per-step KL roll-out error between two ensembles sharing a spec, initial
/// condition and step grid: univariate normal fits per
/// `(particle, coordinate)`, averaged over particles and coordinates.
///
/// Step 0 is excluded (both ensembles start at the same point, so the fits
/// are degenerate there); entry `k` holds step `k + 1`.
pub fn kl_rollout_error(gt: &TrajectoryEnsemble, pred: &TrajectoryEnsemble) -> Result<Vec<f64>> {
    if gt.positions.shape()[1] != pred.positions.shape()[1]
        || gt.positions.shape()[2] != pred.positions.shape()[2]
    {
        return Err(Error::ShapeMismatch {
            op: "kl_rollout_error",
            left: gt.positions.shape().to_vec(),
            right: pred.positions.shape().to_vec(),
        });
    }
    let gt_stats = EnsembleStats::compute(gt)?;
    let pred_stats = EnsembleStats::compute(pred)?;
    kl_from_stats(&gt_stats, &pred_stats)
}

pub(crate) fn kl_from_stats(gt: &EnsembleStats, pred: &EnsembleStats) -> Result<Vec<f64>> {
    let n = gt.n_particles;
    let mut out = Vec::with_capacity(gt.n_steps);
    for step in 1..=gt.n_steps {
        let mut total = 0.0;
        for i in 0..n {
            let m0 = pred.mean_at(step, i);
            let s0 = pred.std_at(step, i);
            let m1 = gt.mean_at(step, i);
            let s1 = gt.std_at(step, i);
            for c in 0..3 {
                total += normal_kl(m0[c], s0[c], m1[c], s1[c])?;
            }
        }
        out.push(total / (3 * n) as f64);
    }
    Ok(out)
}

/// Geometric mean of a non-negative series; 0 if any term is 0.
pub fn geometric_mean(series: &[f64]) -> f64 {
    if series.is_empty() || series.contains(&0.0) {
        return 0.0;
    }
    let log_sum: f64 = series.iter().map(|v| v.ln()).sum();
    (log_sum / series.len() as f64).exp()
}

/// Evaluation protocol: `n_init` initial conditions, each simulated with
/// `seeds_per_init` noise seeds for `steps` steps.
#[derive(Clone, Copy, Debug)]
pub struct Protocol {
    pub n_init: usize,
    pub seeds_per_init: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol {
            n_init: 100,
            seeds_per_init: 10,
            steps: 100,
            seed: 0,
        }
    }
}

impl Protocol {
    pub fn validate(&self) -> Result<()> {
        if self.n_init == 0 || self.steps == 0 {
            return Err(Error::Parameter(
                "protocol needs n_init >= 1 and steps >= 1".to_string(),
            ));
        }
        if self.seeds_per_init < 2 {
            return Err(Error::Parameter(
                "ensemble statistics need seeds_per_init >= 2".to_string(),
            ));
        }
        Ok(())
    }
}

/// What to roll out against the ground truth.
pub enum EvalModel<'a> {
    /// The true force field and gammas (self-consistency baseline).
    GroundTruth,
    /// A trained model.
    Learned(&'a ModelParams),
}

/// Per-experiment metric report.
#[derive(Clone, Debug)]
pub struct MetricReport {
    /// Mean position error per step (step `k+1` at index `k`).
    pub position_error: Vec<f64>,
    /// Mean KL divergence per step (same indexing).
    pub kl: Vec<f64>,
    pub brownian_error: f64,
    pub pe_geometric_mean: f64,
    pub kl_geometric_mean: f64,
    /// Diverged predicted trajectories, excluded from the statistics.
    pub diverged: usize,
    pub total_pred_trajectories: usize,
    /// Coordinates skipped in position error due to degenerate gt std.
    pub degenerate_coordinates: usize,
    pub model: String,
    pub spec_summary: String,
    pub protocol: (usize, usize, usize),
    pub seed: u64,
}

impl MetricReport {
    pub fn is_finite(&self) -> bool {
        self.position_error.iter().all(|v| v.is_finite())
            && self.kl.iter().all(|v| v.is_finite())
            && self.brownian_error.is_finite()
    }
}

struct InitOutcome {
    pe: Vec<f64>,
    kl: Vec<f64>,
    gamma_hat: Array,
    diverged: usize,
    degenerate: usize,
}

/// Runs the full protocol: for every initial condition, a ground-truth and a
/// predicted ensemble are generated with paired noise streams, and the three
/// metrics are averaged per step across initial conditions.
///
/// Noise keys depend only on the protocol seed, so different models evaluated
/// under the same protocol see identical ground truth and identical noise
/// realizations.
pub fn evaluate(model: &EvalModel, spec: &SystemSpec, protocol: &Protocol) -> Result<MetricReport> {
    protocol.validate()?;
    let model_tag = match model {
        EvalModel::GroundTruth => "ground-truth".to_string(),
        EvalModel::Learned(params) => params.family.tag().to_string(),
    };
    if let EvalModel::Learned(params) = model {
        if let Some(fixed) = params.arch.fixed_n {
            if fixed != spec.n_particles {
                return Err(Error::Capability {
                    family: params.family.tag(),
                    reason: format!(
                        "trained for n={fixed}, cannot evaluate n={} (not inductive)",
                        spec.n_particles
                    ),
                });
            }
        }
    }

    let outcomes: Vec<Result<InitOutcome>> = (0..protocol.n_init)
        .into_par_iter()
        .map(|init| evaluate_one_init(model, spec, protocol, init))
        .collect();

    let mut pe = vec![0.0; protocol.steps];
    let mut kl = vec![0.0; protocol.steps];
    let mut gamma_acc = Array::zeros(vec![spec.n_particles]);
    let mut diverged = 0;
    let mut degenerate = 0;
    let mut counted = 0usize;
    for outcome in outcomes {
        let o = outcome?;
        for (acc, v) in pe.iter_mut().zip(&o.pe) {
            *acc += v;
        }
        for (acc, v) in kl.iter_mut().zip(&o.kl) {
            *acc += v;
        }
        for (acc, v) in gamma_acc.data_mut().iter_mut().zip(o.gamma_hat.data()) {
            *acc += v;
        }
        diverged += o.diverged;
        degenerate += o.degenerate;
        counted += 1;
    }
    let total_pred = protocol.n_init * protocol.seeds_per_init;
    if diverged * 10 > total_pred {
        return Err(Error::Training(format!(
            "{diverged} of {total_pred} predicted trajectories diverged (> 10%)"
        )));
    }
    for v in pe.iter_mut() {
        *v /= counted as f64;
    }
    for v in kl.iter_mut() {
        *v /= counted as f64;
    }
    let gamma_mean = gamma_acc.scale(1.0 / counted as f64);
    let brownian = match model {
        EvalModel::GroundTruth => 0.0,
        EvalModel::Learned(_) => brownian_error(&gamma_mean, spec),
    };
    Ok(MetricReport {
        pe_geometric_mean: geometric_mean(&pe),
        kl_geometric_mean: geometric_mean(&kl),
        position_error: pe,
        kl,
        brownian_error: brownian,
        diverged,
        total_pred_trajectories: total_pred,
        degenerate_coordinates: degenerate,
        model: model_tag,
        spec_summary: format!("{}-{}", spec.kind.tag(), spec.n_particles),
        protocol: (protocol.n_init, protocol.seeds_per_init, protocol.steps),
        seed: protocol.seed,
    })
}

fn evaluate_one_init(
    model: &EvalModel,
    spec: &SystemSpec,
    protocol: &Protocol,
    init: usize,
) -> Result<InitOutcome> {
    let n = spec.n_particles;
    let x0 = random_initial_condition(
        spec,
        derive_seed_indexed(protocol.seed, "eval-init", init as u64),
    );
    let gt_stream = NoiseStream::new(derive_seed_indexed(protocol.seed, "eval-gt", init as u64));
    let pred_stream =
        NoiseStream::new(derive_seed_indexed(protocol.seed, "eval-pred", init as u64));

    let mut gt_rows = Vec::with_capacity(protocol.seeds_per_init);
    for s in 0..protocol.seeds_per_init {
        gt_rows.push(rollout(
            spec,
            &x0,
            &GroundTruthDynamics,
            protocol.steps,
            &gt_stream,
            s as u64,
        )?);
    }

    let learned;
    let dynamics: Option<&dyn BrownianDynamics> = match model {
        EvalModel::GroundTruth => Some(&GroundTruthDynamics),
        EvalModel::Learned(params) if params.family != ModelFamily::Nn => {
            learned = LearnedDynamics::new(params, spec)?;
            Some(&learned)
        }
        EvalModel::Learned(_) => None,
    };

    let mut pred_rows = Vec::with_capacity(protocol.seeds_per_init);
    let mut diverged = 0;
    for s in 0..protocol.seeds_per_init {
        let row = match dynamics {
            Some(dynamics) => rollout(spec, &x0, dynamics, protocol.steps, &pred_stream, s as u64),
            None => {
                let EvalModel::Learned(params) = model else {
                    unreachable!()
                };
                nn_direct_rollout(params, spec, &x0, protocol.steps)
            }
        };
        match row {
            Ok(r) => pred_rows.push(r),
            Err(Error::Divergence { .. }) => diverged += 1,
            Err(e) => return Err(e),
        }
    }
    if pred_rows.len() < 2 {
        return Err(Error::Degenerate(format!(
            "initial condition {init}: fewer than 2 surviving predicted trajectories"
        )));
    }

    let gt_ens = stack_rows(spec, gt_rows, protocol.steps);
    let pred_ens = stack_rows(spec, pred_rows, protocol.steps);
    let gt_stats = EnsembleStats::compute(&gt_ens)?;
    let pred_stats = EnsembleStats::compute(&pred_ens)?;

    let mut pe = Vec::with_capacity(protocol.steps);
    let mut degenerate = 0;
    for step in 1..=protocol.steps {
        let mut total = 0.0;
        for i in 0..n {
            let (e, skipped) = position_error(&gt_stats, pred_stats.mean_at(step, i), step, i);
            total += e;
            degenerate += skipped;
        }
        pe.push(total / n as f64);
    }
    let kl = kl_from_stats(&gt_stats, &pred_stats)?;

    let gamma_hat = match model {
        EvalModel::GroundTruth => spec.gammas(),
        EvalModel::Learned(params) => model_gammas(params, spec, &x0)?,
    };

    Ok(InitOutcome {
        pe,
        kl,
        gamma_hat,
        diverged,
        degenerate,
    })
}

fn stack_rows(spec: &SystemSpec, rows: Vec<Array>, steps: usize) -> TrajectoryEnsemble {
    let n = spec.n_particles;
    let n_traj = rows.len();
    let mut data = Vec::with_capacity(n_traj * (steps + 1) * n * 3);
    for row in &rows {
        data.extend_from_slice(row.data());
    }
    TrajectoryEnsemble {
        spec: spec.clone(),
        positions: Array::from_vec(vec![n_traj, steps + 1, n, 3], data).expect("ensemble"),
        seeds: Vec::new(),
    }
}

/// Per-particle gamma estimate of a model at one configuration. NN has no
/// gamma head; its Brownian error is reported against unit gamma.
fn model_gammas(params: &ModelParams, spec: &SystemSpec, x0: &Array) -> Result<Array> {
    match params.family {
        ModelFamily::Nn => Ok(Array::ones(vec![spec.n_particles])),
        _ => {
            let dynamics = LearnedDynamics::new(params, spec)?;
            let (_, gammas) = dynamics.forces_and_gammas(spec, x0, None)?;
            Ok(gammas)
        }
    }
}

/// Deterministic next-position iteration for the NN baseline; every seed
/// yields the same trajectory.
fn nn_direct_rollout(
    params: &ModelParams,
    spec: &SystemSpec,
    x0: &Array,
    steps: usize,
) -> Result<Array> {
    let n = spec.n_particles;
    let mut positions = Vec::with_capacity((steps + 1) * n * 3);
    positions.extend_from_slice(x0.data());
    let mut current = x0.clone().reshape(vec![3 * n])?;
    for step in 0..steps {
        let next = nn_forward(params, &current)?;
        if next
            .data()
            .iter()
            .any(|v| v.abs() > crate::integrator::DIVERGENCE_LIMIT)
        {
            return Err(Error::Divergence {
                step,
                limit: crate::integrator::DIVERGENCE_LIMIT,
            });
        }
        positions.extend_from_slice(next.data());
        current = next;
    }
    Array::from_vec(vec![steps + 1, n, 3], positions)
}

/// Zero-shot generalization target.
#[derive(Clone, Copy, Debug)]
pub enum Target {
    Size(usize),
    Temperature(f64),
}

/// Rebuilds the spec at the target size or temperature and runs [`evaluate`]
/// with unchanged parameters. NN and BNN are rejected: their parameter
/// shapes bake in the training size.
pub fn zero_shot(
    params: &ModelParams,
    trained_on: &SystemSpec,
    target: Target,
    protocol: &Protocol,
) -> Result<MetricReport> {
    if !params.family.is_inductive() {
        return Err(Error::Capability {
            family: params.family.tag(),
            reason: "not inductive; cannot transfer to unseen sizes or temperatures".to_string(),
        });
    }
    let spec = match target {
        Target::Size(n) => trained_on.resized(n)?,
        Target::Temperature(kbt) => {
            if kbt < 0.0 {
                return Err(Error::Parameter("kBT must be >= 0".to_string()));
            }
            trained_on.with_kbt(kbt)
        }
    };
    evaluate(&EvalModel::Learned(params), &spec, protocol)
}

/// The KL floor between two independent ground-truth ensembles under the
/// same protocol, for self-consistency checks.
pub fn ground_truth_baseline(spec: &SystemSpec, protocol: &Protocol) -> Result<MetricReport> {
    evaluate(&EvalModel::GroundTruth, spec, protocol)
}

/// Derives an evaluation protocol seed from a run seed.
pub fn protocol_seed(seed: u64) -> u64 {
    derive_seed(seed, "evaluate")
}
