//! Seedable Euler–Maruyama integration and training-data extraction.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::{derive_seed_indexed, NoiseStream};
use crate::systems::{spring_force, SystemSpec};
use crate::tensor::Array;

/// Any coordinate beyond this magnitude aborts the roll-out; untrained
/// models can explode and should fail loudly with context.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// One Euler–Maruyama step:
/// `x' = x + (F/gamma) dt + sqrt(2 kBT dt / gamma) * noise`, per particle and
/// coordinate. `noise` holds standard normals.
pub fn em_step(
    spec: &SystemSpec,
    positions: &Array,
    forces: &Array,
    gammas: &Array,
    noise: &Array,
) -> Result<Array> {
    let n = spec.n_particles;
    debug_assert_eq!(positions.shape(), &[n, 3]);
    debug_assert_eq!(noise.shape(), &[n, 3]);
    debug_assert_eq!(gammas.len(), n);
    if let Some(i) = forces.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "force on particle {} is not finite",
            i / 3
        )));
    }
    let dt = spec.dt;
    let mut out = Array::zeros(vec![n, 3]);
    let (x, f, w) = (positions.data(), forces.data(), noise.data());
    let o = out.data_mut();
    for i in 0..n {
        let gamma = gammas.data()[i];
        let drift = dt / gamma;
        let amplitude = (2.0 * spec.kbt * dt / gamma).sqrt();
        for c in 0..3 {
            let k = i * 3 + c;
            o[k] = x[k] + f[k] * drift + amplitude * w[k];
        }
    }
    Ok(out)
}

/// Per-step force and friction provider for a roll-out. Ground truth and
/// learned models implement the same interface.
pub trait BrownianDynamics {
    /// Forces and per-particle gammas for the current positions.
    /// `previous` is the preceding step's positions when one exists (used by
    /// models that consume finite-difference velocities).
    fn forces_and_gammas(
        &self,
        spec: &SystemSpec,
        positions: &Array,
        previous: Option<&Array>,
    ) -> Result<(Array, Array)>;
}

/// The true spring forces and spec gammas.
pub struct GroundTruthDynamics;

impl BrownianDynamics for GroundTruthDynamics {
    fn forces_and_gammas(
        &self,
        spec: &SystemSpec,
        positions: &Array,
        _previous: Option<&Array>,
    ) -> Result<(Array, Array)> {
        Ok((spring_force(spec, positions)?, spec.gammas()))
    }
}

/// One trajectory of `steps` Euler–Maruyama steps; row 0 is the initial
/// condition. Noise is keyed by `(stream, trajectory, step)` so the result is
/// independent of scheduling.
pub fn rollout(
    spec: &SystemSpec,
    x0: &Array,
    dynamics: &dyn BrownianDynamics,
    steps: usize,
    stream: &NoiseStream,
    trajectory: u64,
) -> Result<Array> {
    let n = spec.n_particles;
    let mut positions = Vec::with_capacity((steps + 1) * n * 3);
    positions.extend_from_slice(x0.data());
    let mut current = x0.clone();
    let mut previous: Option<Array> = None;
    for step in 0..steps {
        let (forces, gammas) = dynamics.forces_and_gammas(spec, &current, previous.as_ref())?;
        let noise = stream.step_normals(trajectory, step as u64, n);
        let next = em_step(spec, &current, &forces, &gammas, &noise)?;
        if next.data().iter().any(|v| v.abs() > DIVERGENCE_LIMIT) {
            return Err(Error::Divergence {
                step,
                limit: DIVERGENCE_LIMIT,
            });
        }
        positions.extend_from_slice(next.data());
        previous = Some(std::mem::replace(&mut current, next));
    }
    Array::from_vec(vec![steps + 1, n, 3], positions)
}

/// Seeded ground-truth or predicted roll-outs:
/// `positions[traj, step, particle, coord]`.
#[derive(Clone, Debug)]
pub struct TrajectoryEnsemble {
    pub spec: SystemSpec,
    pub positions: Array,
    pub seeds: Vec<u64>,
}

impl TrajectoryEnsemble {
    pub fn n_trajectories(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn n_steps(&self) -> usize {
        self.positions.shape()[1] - 1
    }

    /// Position of `(trajectory, step, particle)` as an xyz slice.
    pub fn at(&self, traj: usize, step: usize, particle: usize) -> &[f64] {
        let shape = self.positions.shape();
        let (s, n) = (shape[1], shape[2]);
        let base = ((traj * s + step) * n + particle) * 3;
        &self.positions.data()[base..base + 3]
    }

    /// Snapshot `[n, 3]` of one trajectory at one step.
    pub fn snapshot(&self, traj: usize, step: usize) -> Array {
        let shape = self.positions.shape();
        let (s, n) = (shape[1], shape[2]);
        let base = (traj * s + step) * n * 3;
        Array::from_vec(
            vec![n, 3],
            self.positions.data()[base..base + n * 3].to_vec(),
        )
        .expect("snapshot shape")
    }
}

/// Consecutive-step training pairs. `velocities` holds the finite-difference
/// velocity of the input step when a predecessor exists in the source
/// trajectory, else zeros.
#[derive(Clone, Debug)]
pub struct StepPairDataset {
    pub spec: SystemSpec,
    pub inputs: Array,
    pub targets: Array,
    pub velocities: Array,
    /// `(trajectory, step)` provenance of each pair.
    pub provenance: Vec<(u32, u32)>,
    pub seed: u64,
}

impl StepPairDataset {
    /// Number of `(X_t, X_{t+dt})` pairs.
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Input positions of pair `i` as `[n, 3]`.
    pub fn input(&self, i: usize) -> Array {
        self.block(&self.inputs, i)
    }

    pub fn target(&self, i: usize) -> Array {
        self.block(&self.targets, i)
    }

    pub fn velocity(&self, i: usize) -> Array {
        self.block(&self.velocities, i)
    }

    fn block(&self, a: &Array, i: usize) -> Array {
        let n = self.spec.n_particles;
        let base = i * n * 3;
        Array::from_vec(vec![n, 3], a.data()[base..base + n * 3].to_vec()).expect("pair shape")
    }

    /// Rows `idx` stacked into `[B*n, 3]` blocks of inputs, targets and
    /// velocities.
    pub fn gather_batch(&self, idx: &[usize]) -> (Array, Array, Array) {
        let n = self.spec.n_particles;
        let mut input = Vec::with_capacity(idx.len() * n * 3);
        let mut target = Vec::with_capacity(idx.len() * n * 3);
        let mut vel = Vec::with_capacity(idx.len() * n * 3);
        for &i in idx {
            let base = i * n * 3;
            input.extend_from_slice(&self.inputs.data()[base..base + n * 3]);
            target.extend_from_slice(&self.targets.data()[base..base + n * 3]);
            vel.extend_from_slice(&self.velocities.data()[base..base + n * 3]);
        }
        let rows = idx.len() * n;
        (
            Array::from_vec(vec![rows, 3], input).expect("batch input"),
            Array::from_vec(vec![rows, 3], target).expect("batch target"),
            Array::from_vec(vec![rows, 3], vel).expect("batch velocity"),
        )
    }
}

/// Particles on a regular ring polygon with side `R`, jittered per coordinate
/// by Gaussian noise of std `0.1 R`.
pub fn random_initial_condition(spec: &SystemSpec, seed: u64) -> Array {
    initial_condition_with_noise(spec, seed, 0.1)
}

/// Ring-polygon placement with a configurable jitter fraction of `R`.
pub fn initial_condition_with_noise(spec: &SystemSpec, seed: u64, jitter: f64) -> Array {
    let n = spec.n_particles;
    let r = spec.equilibrium_length;
    let radius = if n == 2 {
        r / 2.0
    } else {
        r / (2.0 * (std::f64::consts::PI / n as f64).sin())
    };
    let mut data = Vec::with_capacity(n * 3);
    for i in 0..n {
        let theta = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
        data.push(radius * theta.cos());
        data.push(radius * theta.sin());
        data.push(0.0);
    }
    let mut x = Array::from_vec(vec![n, 3], data).expect("ring shape");
    if jitter > 0.0 {
        let noise = NoiseStream::new(seed).step_normals(u64::MAX, 0, n);
        for (xi, wi) in x.data_mut().iter_mut().zip(noise.data()) {
            *xi += jitter * r * wi;
        }
    }
    x
}

/// Ground-truth trajectories from random initial conditions.
///
/// Trajectory `t` uses the sub-seed `derive_seed_indexed(seed, "traj", t)`;
/// trajectories are generated in parallel and the result does not depend on
/// thread count.
pub fn generate_ensemble(
    spec: &SystemSpec,
    n_traj: usize,
    steps: usize,
    seed: u64,
) -> Result<TrajectoryEnsemble> {
    let n = spec.n_particles;
    let seeds: Vec<u64> = (0..n_traj)
        .map(|t| derive_seed_indexed(seed, "traj", t as u64))
        .collect();
    let rows: Vec<Result<Array>> = seeds
        .par_iter()
        .map(|&traj_seed| {
            let x0 = random_initial_condition(spec, derive_seed_indexed(traj_seed, "init", 0));
            rollout(
                spec,
                &x0,
                &GroundTruthDynamics,
                steps,
                &NoiseStream::new(traj_seed),
                0,
            )
        })
        .collect();
    let mut data = Vec::with_capacity(n_traj * (steps + 1) * n * 3);
    for row in rows {
        data.extend_from_slice(row?.data());
    }
    Ok(TrajectoryEnsemble {
        spec: spec.clone(),
        positions: Array::from_vec(vec![n_traj, steps + 1, n, 3], data)?,
        seeds,
    })
}

/// The training protocol: `n_traj` random initial conditions, each rolled out
/// `points_per_traj` steps, with every consecutive-step pair extracted.
/// Dataset size is `n_traj * points_per_traj`.
pub fn generate_training_data(
    spec: &SystemSpec,
    n_traj: usize,
    points_per_traj: usize,
    seed: u64,
) -> Result<StepPairDataset> {
    let ensemble = generate_ensemble(spec, n_traj, points_per_traj, seed)?;
    Ok(extract_pairs(&ensemble, seed))
}

/// Consecutive-step pairs from every trajectory of an ensemble.
pub fn extract_pairs(ensemble: &TrajectoryEnsemble, seed: u64) -> StepPairDataset {
    let spec = ensemble.spec.clone();
    let n = spec.n_particles;
    let n_traj = ensemble.n_trajectories();
    let steps = ensemble.n_steps();
    let mut inputs = Vec::with_capacity(n_traj * steps * n * 3);
    let mut targets = Vec::with_capacity(n_traj * steps * n * 3);
    let mut velocities = Vec::with_capacity(n_traj * steps * n * 3);
    let mut provenance = Vec::with_capacity(n_traj * steps);
    for t in 0..n_traj {
        for s in 0..steps {
            for p in 0..n {
                inputs.extend_from_slice(ensemble.at(t, s, p));
                targets.extend_from_slice(ensemble.at(t, s + 1, p));
                if s == 0 {
                    velocities.extend_from_slice(&[0.0, 0.0, 0.0]);
                } else {
                    let cur = ensemble.at(t, s, p);
                    let prev = ensemble.at(t, s - 1, p);
                    for c in 0..3 {
                        velocities.push((cur[c] - prev[c]) / spec.dt);
                    }
                }
            }
            provenance.push((t as u32, s as u32));
        }
    }
    let rows = n_traj * steps * n;
    StepPairDataset {
        spec,
        inputs: Array::from_vec(vec![rows, 3], inputs).expect("pairs"),
        targets: Array::from_vec(vec![rows, 3], targets).expect("pairs"),
        velocities: Array::from_vec(vec![rows, 3], velocities).expect("pairs"),
        provenance,
        seed,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{default_spec, SystemKind};

    fn zero_noise(n: usize) -> Array {
        Array::zeros(vec![n, 3])
    }

    #[test]
    fn em_step_without_drift_or_noise_is_identity() {
        let spec = default_spec(SystemKind::Linear, 2).unwrap();
        let x = random_initial_condition(&spec, 3);
        let next = em_step(&spec, &x, &Array::zeros(vec![2, 3]), &spec.gammas(), &zero_noise(2))
            .unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn em_step_drift_term() {
        let mut spec = default_spec(SystemKind::Linear, 2).unwrap();
        spec.gamma_per_type = vec![2.0];
        let x = Array::zeros(vec![2, 3]);
        let mut forces = Array::zeros(vec![2, 3]);
        forces.set2(0, 0, 1.0);
        let next = em_step(&spec, &x, &forces, &spec.gammas(), &zero_noise(2)).unwrap();
        assert!((next.get2(0, 0) - 5e-4).abs() < 1e-18);
        assert_eq!(next.get2(1, 0), 0.0);
    }

    #[test]
    fn em_step_diffusion_amplitude() {
        let spec = default_spec(SystemKind::Linear, 2).unwrap();
        let x = Array::zeros(vec![2, 3]);
        let noise = Array::ones(vec![2, 3]);
        let next = em_step(&spec, &x, &Array::zeros(vec![2, 3]), &spec.gammas(), &noise).unwrap();
        let expected = (2e-3f64).sqrt();
        for &v in next.data() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn em_step_rejects_non_finite_forces() {
        let spec = default_spec(SystemKind::Linear, 2).unwrap();
        let x = Array::zeros(vec![2, 3]);
        let mut forces = Array::zeros(vec![2, 3]);
        forces.set2(1, 2, f64::NAN);
        let err = em_step(&spec, &x, &forces, &spec.gammas(), &zero_noise(2)).unwrap_err();
        assert!(err.to_string().contains("particle 1"));
    }

    #[test]
    fn zero_temperature_equilibrium_rollout_is_constant() {
        let mut spec = default_spec(SystemKind::Linear, 4).unwrap();
        spec.kbt = 0.0;
        let x0 = initial_condition_with_noise(&spec, 0, 0.0);
        let traj = rollout(&spec, &x0, &GroundTruthDynamics, 1, &NoiseStream::new(1), 0).unwrap();
        for c in 0..4 * 3 {
            assert!((traj.data()[c] - traj.data()[4 * 3 + c]).abs() < 1e-12);
        }
    }

    #[test]
    fn unperturbed_initial_condition_is_a_ring_at_equilibrium() {
        let spec = default_spec(SystemKind::Linear, 5).unwrap();
        let x = initial_condition_with_noise(&spec, 0, 0.0);
        let f = spring_force(&spec, &x).unwrap();
        for &v in f.data() {
            assert!(v.abs() < 1e-10, "{v}");
        }

        let spec2 = default_spec(SystemKind::Linear, 2).unwrap();
        let x2 = initial_condition_with_noise(&spec2, 0, 0.0);
        let dx: f64 = (0..3)
            .map(|c| (x2.get2(0, c) - x2.get2(1, c)).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!((dx - 1.0).abs() < 1e-12);
    }

    #[test]
    fn initial_conditions_are_seed_deterministic() {
        let spec = default_spec(SystemKind::Linear, 5).unwrap();
        let a = random_initial_condition(&spec, 11);
        let b = random_initial_condition(&spec, 11);
        let c = random_initial_condition(&spec, 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let spec = default_spec(SystemKind::Linear, 5).unwrap();
        let d1 = generate_training_data(&spec, 4, 25, 7).unwrap();
        assert_eq!(d1.len(), 100);
        assert_eq!(d1.inputs.shape(), &[100 * 5, 3]);
        let d2 = generate_training_data(&spec, 4, 25, 7).unwrap();
        assert_eq!(d1.inputs, d2.inputs);
        assert_eq!(d1.targets, d2.targets);

        let tiny = generate_training_data(&spec, 1, 1, 7).unwrap();
        assert_eq!(tiny.len(), 1);
    }

    /// The benchmark protocol: 100 trajectories x 100 extracted points.
    #[test]
    fn benchmark_dataset_has_ten_thousand_pairs() {
        let spec = default_spec(SystemKind::Linear, 5).unwrap();
        let d = generate_training_data(&spec, 100, 100, 1).unwrap();
        assert_eq!(d.len(), 10_000);
        assert_eq!(d.inputs.shape(), &[10_000 * 5, 3]);
        assert_eq!(d.seed, 1);
    }

    #[test]
    fn pairs_are_consecutive_and_velocities_match() {
        let spec = default_spec(SystemKind::Linear, 3).unwrap();
        let ens = generate_ensemble(&spec, 2, 4, 5).unwrap();
        let ds = extract_pairs(&ens, 5);
        assert_eq!(ds.len(), 8);
        // Pair (traj 1, step 2): input = ens[1,2], target = ens[1,3].
        let idx = 4 + 2;
        assert_eq!(ds.provenance[idx], (1, 2));
        let mut expected_input = Vec::new();
        for p in 0..3 {
            expected_input.extend_from_slice(ens.at(1, 2, p));
        }
        assert_eq!(ds.input(idx).data(), expected_input.as_slice());
        let vel = ds.velocity(idx);
        for p in 0..3 {
            for c in 0..3 {
                let expected = (ens.at(1, 2, p)[c] - ens.at(1, 1, p)[c]) / spec.dt;
                assert!((vel.get2(p, c) - expected).abs() < 1e-12);
            }
        }
        // First pair of each trajectory has zero velocity.
        assert_eq!(ds.velocity(0).data(), &[0.0; 9]);
        assert_eq!(ds.velocity(4).data(), &[0.0; 9]);
    }

    /// Free diffusion: ensemble MSD(t) tracks 6 kBT t / gamma.
    #[test]
    fn free_diffusion_msd_slope() {
        let mut spec = default_spec(SystemKind::Linear, 2).unwrap();
        spec.topology.clear();
        let n_traj = 2000;
        let steps = 100;
        let x0 = Array::zeros(vec![2, 3]);
        let stream = NoiseStream::new(901);
        let mut msd = vec![0.0; steps + 1];
        for t in 0..n_traj {
            let traj = rollout(&spec, &x0, &GroundTruthDynamics, steps, &stream, t as u64)
                .unwrap();
            for (s, acc) in msd.iter_mut().enumerate() {
                let frame = &traj.data()[s * 6..(s + 1) * 6];
                *acc += frame.iter().map(|v| v * v).sum::<f64>() / 2.0; // two particles
            }
        }
        for m in msd.iter_mut() {
            *m /= n_traj as f64;
        }
        // Least squares through the origin: slope = sum(t*msd)/sum(t^2).
        let mut num = 0.0;
        let mut den = 0.0;
        for (s, &m) in msd.iter().enumerate() {
            let t = s as f64 * spec.dt;
            num += t * m;
            den += t * t;
        }
        let slope = num / den;
        let expected = 6.0 * spec.kbt / 1.0;
        assert!(
            (slope - expected).abs() / expected < 0.05,
            "slope {slope} vs {expected}"
        );
    }

    /// A particle tethered to a fixed anchor by a linear spring has
    /// stationary positional variance kBT / k per coordinate.
    #[test]
    fn tethered_particle_stationary_variance() {
        struct Tether {
            k: f64,
        }
        impl BrownianDynamics for Tether {
            fn forces_and_gammas(
                &self,
                spec: &SystemSpec,
                positions: &Array,
                _previous: Option<&Array>,
            ) -> Result<(Array, Array)> {
                let f = positions.scale(-self.k);
                Ok((f, spec.gammas()))
            }
        }
        let mut spec = default_spec(SystemKind::Linear, 2).unwrap();
        spec.topology.clear();
        let k = 10.0;
        // Relaxation time gamma/k = 0.1 = 100 steps; burn in 10x, then sample.
        let steps = 120_000;
        let x0 = Array::zeros(vec![2, 3]);
        let traj = rollout(&spec, &x0, &Tether { k }, steps, &NoiseStream::new(77), 0).unwrap();
        let burn = 2_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut count = 0usize;
        for s in burn..=steps {
            for v in &traj.data()[s * 6..(s + 1) * 6] {
                sum += v;
                sumsq += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sumsq / count as f64 - mean * mean;
        let expected = spec.kbt / k;
        assert!(
            (var - expected).abs() / expected < 0.05,
            "var {var} vs {expected}"
        );
    }

    /// With forces zeroed the per-step displacement is Gaussian with variance
    /// 2 kBT dt / gamma (moment test over >= 1e5 draws).
    #[test]
    fn diffusion_only_displacement_moments() {
        let mut spec = default_spec(SystemKind::Linear, 2).unwrap();
        spec.topology.clear();
        let steps = 10_000;
        let x0 = Array::zeros(vec![2, 3]);
        let stream = NoiseStream::new(31);
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        let mut sum4 = 0.0;
        let mut count = 0usize;
        for t in 0..3u64 {
            let traj = rollout(&spec, &x0, &GroundTruthDynamics, steps, &stream, t).unwrap();
            for s in 0..steps {
                for k in 0..6 {
                    let d = traj.data()[(s + 1) * 6 + k] - traj.data()[s * 6 + k];
                    sum += d;
                    sumsq += d * d;
                    sum4 += d * d * d * d;
                    count += 1;
                }
            }
        }
        let nf = count as f64;
        let mean = sum / nf;
        let var = sumsq / nf - mean * mean;
        let expected = 2.0 * spec.kbt * spec.dt / 1.0;
        // Mean within 5 sigma of zero, variance within 1%, kurtosis ~ 3.
        assert!(mean.abs() < 5.0 * (expected / nf).sqrt(), "mean {mean}");
        assert!((var - expected).abs() / expected < 0.01, "var {var}");
        let kurt = sum4 / nf / (var * var);
        assert!((kurt - 3.0).abs() < 0.1, "kurtosis {kurt}");
    }

    #[test]
    fn drift_only_reduces_to_explicit_euler() {
        let mut spec = default_spec(SystemKind::Linear, 3).unwrap();
        spec.kbt = 0.0;
        let x0 = random_initial_condition(&spec, 8);
        let traj = rollout(&spec, &x0, &GroundTruthDynamics, 5, &NoiseStream::new(8), 0).unwrap();
        let mut x = x0.clone();
        for s in 0..5 {
            let f = spring_force(&spec, &x).unwrap();
            x = x.add(&f.scale(spec.dt)).unwrap();
            for (a, b) in x.data().iter().zip(&traj.data()[(s + 1) * 9..(s + 2) * 9]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn ensembles_are_bit_identical_across_runs() {
        let spec = default_spec(SystemKind::Binary, 10).unwrap();
        let a = generate_ensemble(&spec, 3, 10, 42).unwrap();
        let b = generate_ensemble(&spec, 3, 10, 42).unwrap();
        assert_eq!(a.positions, b.positions);
        assert_eq!(a.seeds, b.seeds);
    }

    #[test]
    fn divergence_is_reported_with_step_index() {
        struct Explode;
        impl BrownianDynamics for Explode {
            fn forces_and_gammas(
                &self,
                spec: &SystemSpec,
                _positions: &Array,
                _previous: Option<&Array>,
            ) -> Result<(Array, Array)> {
                Ok((
                    Array::full(vec![spec.n_particles, 3], 1e12),
                    spec.gammas(),
                ))
            }
        }
        let spec = default_spec(SystemKind::Linear, 2).unwrap();
        let x0 = Array::zeros(vec![2, 3]);
        let err = rollout(&spec, &x0, &Explode, 10, &NoiseStream::new(1), 0).unwrap_err();
        match err {
            Error::Divergence { step, .. } => assert_eq!(step, 0),
            other => panic!("expected divergence, got {other}"),
        }
    }
}
