//! Bounded particle swarm search over the refined parameter box.
//!
//! Standard inertia-weight PSO: per particle and dimension the velocity is
//! relaxed toward the personal and global best positions with uniform random
//! gains, positions are clamped to the box (velocity left unchanged on a
//! clamp), and velocities are capped at the box half-width. The inertia
//! follows the linear schedule `omega(t) = 0.99 - 0.79 t / max_iters`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::objective::SearchSpace;

#[derive(Debug, Clone, Copy)]
pub struct PsoOpts {
    pub particles: usize,
    pub max_iters: usize,
    /// Cognitive acceleration.
    pub c1: f64,
    /// Social acceleration.
    pub c2: f64,
    pub omega_start: f64,
    pub omega_slope: f64,
    /// Per-dimension gbest movement (relative to the box width) below which
    /// an iteration counts as stalled.
    pub tol: f64,
    /// Consecutive stalled iterations before stopping early.
    pub stall_iters: usize,
    pub seed: u64,
}

impl Default for PsoOpts {
    fn default() -> Self {
        Self {
            particles: 100,
            max_iters: 500,
            c1: 2.5,
            c2: 0.5,
            omega_start: 0.99,
            omega_slope: 0.79,
            tol: 1e-5,
            stall_iters: 25,
            seed: 0,
        }
    }
}

impl PsoOpts {
    /// Inertia weight at (1-based) iteration `t`.
    pub fn omega(&self, t: usize) -> f64 {
        self.omega_start - self.omega_slope * t as f64 / self.max_iters as f64
    }
}

/// Particle swarm over a box search space.
#[derive(Debug, Clone)]
pub struct SwarmState {
    pub positions: Vec<Vec<f64>>,
    pub velocities: Vec<Vec<f64>>,
    pub pbest: Vec<Vec<f64>>,
    pub pbest_fitness: Vec<f64>,
    pub gbest: Vec<f64>,
    pub gbest_fitness: f64,
    lower: Vec<f64>,
    upper: Vec<f64>,
    vmax: Vec<f64>,
    rng: ChaCha8Rng,
    pub evaluations: usize,
}

impl SwarmState {
    /// Initialize particles uniformly inside the box with zero velocities and
    /// evaluate them.
    pub fn init<F: FnMut(&[f64]) -> f64>(
        space: &SearchSpace,
        particles: usize,
        seed: u64,
        fitness: &mut F,
    ) -> Self {
        let dim = space.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut positions = Vec::with_capacity(particles);
        for _ in 0..particles {
            let pos: Vec<f64> = (0..dim)
                .map(|d| {
                    let (lo, hi) = (space.lower[d], space.upper[d]);
                    if hi > lo {
                        rng.random_range(lo..hi)
                    } else {
                        lo
                    }
                })
                .collect();
            positions.push(pos);
        }
        let pbest_fitness: Vec<f64> = positions.iter().map(|p| fitness(p)).collect();
        let evaluations = particles;
        let best = (0..particles)
            .min_by(|&a, &b| pbest_fitness[a].partial_cmp(&pbest_fitness[b]).expect("finite"))
            .expect("at least one particle");
        let vmax: Vec<f64> = (0..dim).map(|d| space.width(d) / 2.0).collect();
        Self {
            velocities: vec![vec![0.0; dim]; particles],
            pbest: positions.clone(),
            gbest: positions[best].clone(),
            gbest_fitness: pbest_fitness[best],
            positions,
            pbest_fitness,
            lower: space.lower.clone(),
            upper: space.upper.clone(),
            vmax,
            rng,
            evaluations,
        }
    }

    pub fn num_particles(&self) -> usize {
        self.positions.len()
    }

    /// One PSO iteration: velocity and position update, box clamping,
    /// fitness evaluation, pbest/gbest update. Velocity updates read the
    /// gbest as of the start of the iteration.
    pub fn step<F: FnMut(&[f64]) -> f64>(&mut self, opts: &PsoOpts, t: usize, fitness: &mut F) {
        let omega = opts.omega(t);
        let dim = self.gbest.len();
        let gbest_snapshot = self.gbest.clone();
        for q in 0..self.positions.len() {
            for d in 0..dim {
                let r1: f64 = self.rng.random();
                let r2: f64 = self.rng.random();
                let v = omega * self.velocities[q][d]
                    + opts.c1 * r1 * (self.pbest[q][d] - self.positions[q][d])
                    + opts.c2 * r2 * (gbest_snapshot[d] - self.positions[q][d]);
                self.velocities[q][d] = v.clamp(-self.vmax[d], self.vmax[d]);
                self.positions[q][d] = (self.positions[q][d] + self.velocities[q][d])
                    .clamp(self.lower[d], self.upper[d]);
            }
            let f = fitness(&self.positions[q]);
            self.evaluations += 1;
            if f < self.pbest_fitness[q] {
                self.pbest_fitness[q] = f;
                self.pbest[q] = self.positions[q].clone();
                if f < self.gbest_fitness {
                    self.gbest_fitness = f;
                    self.gbest = self.positions[q].clone();
                }
            }
        }
    }
}
