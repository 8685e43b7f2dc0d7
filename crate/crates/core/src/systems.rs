//! Benchmark systems: linear, non-linear and binary spring rings with
//! ground-truth force fields and noise parameters.

use crate::error::{Error, Result};
use crate::tensor::Array;

/// Functional form of the spring force law.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ForceLaw {
    /// Per bond: `-k (d - R)` along the bond direction.
    Linear,
    /// Per bond: `-k (d - R)^3` along the bond direction.
    Cubic,
}

/// The three benchmark families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SystemKind {
    Linear,
    Nonlinear,
    Binary,
}

impl SystemKind {
    pub fn tag(&self) -> &'static str {
        match self {
            SystemKind::Linear => "linear",
            SystemKind::Nonlinear => "nonlinear",
            SystemKind::Binary => "binary",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(SystemKind::Linear),
            "nonlinear" => Ok(SystemKind::Nonlinear),
            "binary" => Ok(SystemKind::Binary),
            other => Err(Error::Parameter(format!("unknown system kind `{other}`"))),
        }
    }
}

/// Full physical description of a benchmark system.
///
/// Topology lists one directed edge per spring; a ring of `n` particles has
/// `n` springs `i -> (i+1) mod n`. Mass is carried for completeness but the
/// overdamped equations never use it (`gamma = M * zeta` absorbs it).
#[derive(Clone, Debug)]
pub struct SystemSpec {
    pub kind: SystemKind,
    pub n_particles: usize,
    pub topology: Vec<(usize, usize)>,
    pub force_law: ForceLaw,
    pub stiffness: f64,
    pub equilibrium_length: f64,
    pub particle_types: Vec<usize>,
    pub gamma_per_type: Vec<f64>,
    pub mass: f64,
    pub kbt: f64,
    pub dt: f64,
}

impl SystemSpec {
    /// Checks every invariant; call after hand-building or deserializing.
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 2 {
            return Err(Error::Parameter(format!(
                "need at least 2 particles, got {}",
                self.n_particles
            )));
        }
        if self.particle_types.len() != self.n_particles {
            return Err(Error::Parameter(
                "particle_types length != n_particles".to_string(),
            ));
        }
        let n_types = self.n_types();
        if self.gamma_per_type.len() != n_types {
            return Err(Error::Parameter(format!(
                "gamma_per_type has {} entries for {} types",
                self.gamma_per_type.len(),
                n_types
            )));
        }
        if self.gamma_per_type.iter().any(|&g| !g.is_finite() || g <= 0.0) {
            return Err(Error::Parameter("every gamma must be > 0".to_string()));
        }
        if self.kbt < 0.0 {
            return Err(Error::Parameter("kBT must be >= 0".to_string()));
        }
        if !self.dt.is_finite() || self.dt <= 0.0 {
            return Err(Error::Parameter("dt must be > 0".to_string()));
        }
        for &(i, j) in &self.topology {
            if i >= self.n_particles || j >= self.n_particles {
                return Err(Error::Parameter(format!(
                    "topology edge ({i}, {j}) references a particle outside 0..{}",
                    self.n_particles
                )));
            }
        }
        let expected_types = match self.kind {
            SystemKind::Binary => 2,
            _ => 1,
        };
        if n_types != expected_types {
            return Err(Error::Parameter(format!(
                "{} system must have exactly {expected_types} particle type(s), got {n_types}",
                self.kind.tag()
            )));
        }
        Ok(())
    }

    /// Number of particle types (width of the one-hot node features).
    pub fn n_types(&self) -> usize {
        self.particle_types.iter().copied().max().unwrap_or(0) + 1
    }

    /// Friction coefficient of one particle.
    pub fn gamma_of(&self, particle: usize) -> f64 {
        self.gamma_per_type[self.particle_types[particle]]
    }

    /// Per-particle friction coefficients.
    pub fn gammas(&self) -> Array {
        let data = (0..self.n_particles).map(|i| self.gamma_of(i)).collect();
        Array::from_vec(vec![self.n_particles], data).expect("gamma shape")
    }

    /// A copy with a different particle count (same kind and parameters).
    pub fn resized(&self, n: usize) -> Result<SystemSpec> {
        let mut spec = default_spec(self.kind, n)?;
        spec.stiffness = self.stiffness;
        spec.equilibrium_length = self.equilibrium_length;
        spec.gamma_per_type = self.gamma_per_type.clone();
        spec.mass = self.mass;
        spec.kbt = self.kbt;
        spec.dt = self.dt;
        Ok(spec)
    }

    /// A copy at a different temperature.
    pub fn with_kbt(&self, kbt: f64) -> SystemSpec {
        let mut spec = self.clone();
        spec.kbt = kbt;
        spec
    }
}

/// Positions of all particles at one instant.
#[derive(Clone, Debug)]
pub struct State {
    pub positions: Array,
    pub time: f64,
}

/// Summed spring forces per particle.
///
/// Each topology edge is one spring: the scalar law acts along the unit bond
/// vector on the source particle with the equal-and-opposite reaction on the
/// target. Total force sums to zero.
pub fn spring_force(spec: &SystemSpec, positions: &Array) -> Result<Array> {
    let n = spec.n_particles;
    debug_assert_eq!(positions.shape(), &[n, 3]);
    let mut forces = Array::zeros(vec![n, 3]);
    let x = positions.data();
    let f = forces.data_mut();
    for &(i, j) in &spec.topology {
        let mut d2 = 0.0;
        let mut bond = [0.0; 3];
        for c in 0..3 {
            bond[c] = x[i * 3 + c] - x[j * 3 + c];
            d2 += bond[c] * bond[c];
        }
        let d = d2.sqrt();
        if d <= 1e-9 {
            return Err(Error::Singularity(i, j));
        }
        let stretch = d - spec.equilibrium_length;
        let magnitude = match spec.force_law {
            ForceLaw::Linear => -spec.stiffness * stretch,
            ForceLaw::Cubic => -spec.stiffness * stretch * stretch * stretch,
        };
        for c in 0..3 {
            let fc = magnitude * bond[c] / d;
            f[i * 3 + c] += fc;
            f[j * 3 + c] -= fc;
        }
    }
    Ok(forces)
}

/// Potential energy matching [`spring_force`]: `k (d-R)^2 / 2` per bond for
/// the linear law, `k (d-R)^4 / 4` for the cubic law.
pub fn potential_energy(spec: &SystemSpec, positions: &Array) -> Result<f64> {
    let x = positions.data();
    let mut u = 0.0;
    for &(i, j) in &spec.topology {
        let mut d2 = 0.0;
        for c in 0..3 {
            let b = x[i * 3 + c] - x[j * 3 + c];
            d2 += b * b;
        }
        let d = d2.sqrt();
        if d <= 1e-9 {
            return Err(Error::Singularity(i, j));
        }
        let s = d - spec.equilibrium_length;
        u += match spec.force_law {
            ForceLaw::Linear => 0.5 * spec.stiffness * s * s,
            ForceLaw::Cubic => 0.25 * spec.stiffness * s * s * s * s,
        };
    }
    Ok(u)
}

/// Standard deviation of the stochastic force process for one particle:
/// `sqrt(2 gamma_i kBT)`.
pub fn ground_truth_sigma(spec: &SystemSpec, particle: usize) -> f64 {
    (2.0 * spec.gamma_of(particle) * spec.kbt).sqrt()
}

/// Benchmark defaults: ring topology, unit stiffness/length/temperature,
/// `dt = 1e-3`. Binary systems use a 3:7 type split with gammas 1 and 2.
pub fn default_spec(kind: SystemKind, n: usize) -> Result<SystemSpec> {
    if n < 2 {
        return Err(Error::Parameter(format!(
            "ring systems need n >= 2, got {n}"
        )));
    }
    let (particle_types, gamma_per_type) = match kind {
        SystemKind::Binary => {
            if !n.is_multiple_of(10) {
                return Err(Error::Parameter(format!(
                    "binary systems need n divisible by 10 for the 3:7 type ratio, got {n}"
                )));
            }
            let n_type0 = 3 * n / 10;
            let mut types = vec![0usize; n_type0];
            types.extend(std::iter::repeat_n(1, n - n_type0));
            (types, vec![1.0, 2.0])
        }
        _ => (vec![0usize; n], vec![1.0]),
    };
    let topology = (0..n).map(|i| (i, (i + 1) % n)).collect();
    let spec = SystemSpec {
        kind,
        n_particles: n,
        topology,
        force_law: match kind {
            SystemKind::Nonlinear => ForceLaw::Cubic,
            _ => ForceLaw::Linear,
        },
        stiffness: 1.0,
        equilibrium_length: 1.0,
        particle_types,
        gamma_per_type,
        mass: 1.0,
        kbt: 1.0,
        dt: 1e-3,
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn positions(coords: &[[f64; 3]]) -> Array {
        let data = coords.iter().flatten().copied().collect();
        Array::from_vec(vec![coords.len(), 3], data).unwrap()
    }

    fn two_particle_single_bond(law: ForceLaw) -> SystemSpec {
        SystemSpec {
            kind: if law == ForceLaw::Cubic {
                SystemKind::Nonlinear
            } else {
                SystemKind::Linear
            },
            n_particles: 2,
            topology: vec![(0, 1)],
            force_law: law,
            stiffness: 1.0,
            equilibrium_length: 1.0,
            particle_types: vec![0, 0],
            gamma_per_type: vec![1.0],
            mass: 1.0,
            kbt: 1.0,
            dt: 1e-3,
        }
    }

    #[test]
    fn equilibrium_ring_has_zero_force() {
        let spec = default_spec(SystemKind::Linear, 4).unwrap();
        // Square with side exactly R = 1.
        let x = positions(&[
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.0, 1.0, 0.0],
        ]);
        let f = spring_force(&spec, &x).unwrap();
        for &v in f.data() {
            assert!(v.abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn linear_stretch_pulls_particles_together() {
        let spec = two_particle_single_bond(ForceLaw::Linear);
        let x = positions(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let f = spring_force(&spec, &x).unwrap();
        // d = 2, stretch = 1: force on 0 is -(d-R) along (x0-x1)/d = (-1,0,0),
        // i.e. (1, 0, 0); equal and opposite on 1.
        assert!((f.get2(0, 0) - 1.0).abs() < 1e-12);
        assert!((f.get2(1, 0) + 1.0).abs() < 1e-12);
        for c in 1..3 {
            assert_eq!(f.get2(0, c), 0.0);
            assert_eq!(f.get2(1, c), 0.0);
        }
    }

    #[test]
    fn cubic_force_at_half_stretch() {
        let spec = two_particle_single_bond(ForceLaw::Cubic);
        let x = positions(&[[0.0, 0.0, 0.0], [1.5, 0.0, 0.0]]);
        let f = spring_force(&spec, &x).unwrap();
        assert!((f.get2(0, 0) - 0.125).abs() < 1e-12);
        assert!((f.get2(1, 0) + 0.125).abs() < 1e-12);
    }

    #[test]
    fn coincident_bonded_particles_error_names_the_bond() {
        let spec = two_particle_single_bond(ForceLaw::Linear);
        let x = positions(&[[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]]);
        let err = spring_force(&spec, &x).unwrap_err();
        assert!(err.to_string().contains('0') && err.to_string().contains('1'));
    }

    #[test]
    fn ground_truth_sigma_formula() {
        let mut spec = default_spec(SystemKind::Linear, 5).unwrap();
        assert!((ground_truth_sigma(&spec, 0) - 2.0f64.sqrt()).abs() < 1e-12);
        spec.gamma_per_type = vec![2.0];
        assert!((ground_truth_sigma(&spec, 0) - 2.0).abs() < 1e-12);
        spec.kbt = 0.0;
        assert_eq!(ground_truth_sigma(&spec, 0), 0.0);
    }

    #[test]
    fn default_linear_five() {
        let spec = default_spec(SystemKind::Linear, 5).unwrap();
        assert_eq!(spec.n_particles, 5);
        assert_eq!(spec.topology.len(), 5);
        assert_eq!(spec.stiffness, 1.0);
        assert_eq!(spec.gamma_per_type, vec![1.0]);
        assert_eq!(spec.kbt, 1.0);
        assert_eq!(spec.dt, 1e-3);
        assert_eq!(spec.force_law, ForceLaw::Linear);
    }

    #[test]
    fn default_binary_ten_uses_three_seven_split() {
        let spec = default_spec(SystemKind::Binary, 10).unwrap();
        assert_eq!(spec.particle_types, vec![0, 0, 0, 1, 1, 1, 1, 1, 1, 1]);
        assert_eq!(spec.gamma_per_type, vec![1.0, 2.0]);
        assert!((ground_truth_sigma(&spec, 9) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn default_nonlinear_two_is_the_smallest_ring() {
        let spec = default_spec(SystemKind::Nonlinear, 2).unwrap();
        assert_eq!(spec.topology, vec![(0, 1), (1, 0)]);
        assert_eq!(spec.force_law, ForceLaw::Cubic);
    }

    #[test]
    fn invalid_sizes_are_rejected() {
        assert!(default_spec(SystemKind::Linear, 1).is_err());
        assert!(default_spec(SystemKind::Binary, 7).is_err());
    }

    fn random_positions(n: usize, seed: u64) -> Array {
        use rand::Rng;
        let mut rng = crate::rng::rng_for(seed, "systems-test");
        let data: Vec<f64> = (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect();
        Array::from_vec(vec![n, 3], data).unwrap()
    }

    proptest! {
        #[test]
        fn newtons_third_law_and_translation_invariance(seed in 0u64..200, shift in -5.0f64..5.0) {
            let spec = default_spec(SystemKind::Linear, 5).unwrap();
            let x = random_positions(5, seed);
            let f = spring_force(&spec, &x).unwrap();
            for c in 0..3 {
                let total: f64 = (0..5).map(|i| f.get2(i, c)).sum();
                prop_assert!(total.abs() < 1e-10);
            }
            let shifted = x.map(|v| v + shift);
            let f2 = spring_force(&spec, &shifted).unwrap();
            for (a, b) in f.data().iter().zip(f2.data()) {
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn force_is_negative_gradient_of_potential() {
        for kind in [SystemKind::Linear, SystemKind::Nonlinear] {
            let spec = default_spec(kind, 4).unwrap();
            let x = random_positions(4, 99);
            let f = spring_force(&spec, &x).unwrap();
            let h = 1e-6;
            for i in 0..4 {
                for c in 0..3 {
                    let mut plus = x.clone();
                    plus.data_mut()[i * 3 + c] += h;
                    let mut minus = x.clone();
                    minus.data_mut()[i * 3 + c] -= h;
                    let grad = (potential_energy(&spec, &plus).unwrap()
                        - potential_energy(&spec, &minus).unwrap())
                        / (2.0 * h);
                    let expected = -grad;
                    let got = f.get2(i, c);
                    let scale = expected.abs().max(1e-3);
                    assert!(
                        (got - expected).abs() / scale < 1e-5,
                        "kind {kind:?} particle {i} coord {c}: {got} vs {expected}"
                    );
                }
            }
        }
    }
}
