//! Population dynamics on the emergent mass shell.
//!
//! On a one-dimensional momentum lattice with energy `E(p) = √(m² + αp²)`,
//! jump rates are built in the symmetric-splitting form
//!
//! ```text
//! W(p, Δ) = g(p, p+Δ) · exp(−β(E(p+Δ) − E(p))/2)
//! ```
//!
//! with a symmetric base rate `g`, so detailed balance
//! `W(p,Δ)e^{−βE(p)} = W(p+Δ,−Δ)e^{−βE(p+Δ)}` holds identically and the
//! Gibbs populations `f_β ∝ e^{−βE(p)}` (the Maxwell–Jüttner restriction to
//! the lattice) are stationary. Evolution is an explicit flux-form update,
//! mass-conserving and positivity-preserving, with the free energy
//! `F[f] = Σ f (E + β⁻¹ log f)` logged as a convergence certificate.
//!
//! Jumps leaving the lattice are removed from both gain and loss terms, which
//! preserves detailed balance exactly on the truncated graph. A small
//! three-dimensional grid with the same construction is available in
//! [`grid3`] for spot checks of the radial reduction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum KineticsError {
    #[error("invalid jump model parameter {name}: {value}")]
    InvalidParameter { name: &'static str, value: f64 },
    #[error("jump set must be nonempty and symmetric (Δ and -Δ)")]
    BadJumpSet,
    #[error("population must be normalized (mass = {0})")]
    NotNormalized(f64),
    #[error("population length {got} does not match lattice size {want}")]
    SizeMismatch { got: usize, want: usize },
    #[error("evolution unstable: {0} retries exhausted")]
    Unstable(usize),
    #[error("lattice does not cover the window |p| <= {0}")]
    WindowNotCovered(f64),
}

/// Symmetric base rate of a jump `p → p'`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "width")]
pub enum BaseRate {
    /// `g ≡ 1`.
    Unit,
    /// `g = exp(−(p'−p)²/(2w²))`.
    Gaussian(f64),
}

impl BaseRate {
    fn eval(&self, p: f64, p2: f64) -> f64 {
        match self {
            BaseRate::Unit => 1.0,
            BaseRate::Gaussian(w) => (-(p2 - p) * (p2 - p) / (2.0 * w * w)).exp(),
        }
    }
}

/// Jump process on the lattice `p ∈ {−P h, …, P h}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JumpModel {
    half_width: usize,
    step: f64,
    /// Allowed jumps in lattice units; closed under negation.
    jumps: Vec<i64>,
    mass: f64,
    alpha: f64,
    beta: f64,
    base_rate: BaseRate,
}

impl JumpModel {
    pub fn new(
        half_width: usize,
        step: f64,
        jumps: &[i64],
        mass: f64,
        alpha: f64,
        beta: f64,
        base_rate: BaseRate,
    ) -> Result<Self, KineticsError> {
        if !(step > 0.0) {
            return Err(KineticsError::InvalidParameter { name: "step", value: step });
        }
        if !(mass > 0.0) {
            return Err(KineticsError::InvalidParameter { name: "mass", value: mass });
        }
        if !(alpha > 0.0) {
            return Err(KineticsError::InvalidParameter { name: "alpha", value: alpha });
        }
        if !(beta >= 0.0) {
            return Err(KineticsError::InvalidParameter { name: "beta", value: beta });
        }
        if let BaseRate::Gaussian(w) = base_rate {
            if !(w > 0.0) {
                return Err(KineticsError::InvalidParameter { name: "base_rate.width", value: w });
            }
        }
        let mut jumps: Vec<i64> = jumps.iter().copied().filter(|d| *d != 0).collect();
        jumps.sort_unstable();
        jumps.dedup();
        if jumps.is_empty() || !jumps.iter().all(|d| jumps.contains(&-d)) {
            return Err(KineticsError::BadJumpSet);
        }
        // irreducibility on the truncated lattice needs a unit step or a
        // coprime pair; the default {±1, ±2} satisfies it
        Ok(Self { half_width, step, jumps, mass, alpha, beta, base_rate })
    }

    /// Default lattice: 401 points, `h = 0.1`, jumps `{±h, ±2h}`.
    pub fn standard(mass: f64, alpha: f64, beta: f64) -> Self {
        Self::new(200, 0.1, &[-2, -1, 1, 2], mass, alpha, beta, BaseRate::Gaussian(0.5))
            .expect("standard model parameters are valid")
    }

    pub fn len(&self) -> usize {
        2 * self.half_width + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn jumps(&self) -> &[i64] {
        &self.jumps
    }

    pub fn momentum(&self, idx: usize) -> f64 {
        (idx as i64 - self.half_width as i64) as f64 * self.step
    }

    /// `E(p) = √(m² + αp²)`.
    pub fn energy(&self, p: f64) -> f64 {
        (self.mass * self.mass + self.alpha * p * p).sqrt()
    }

    /// Rate of the jump from site `idx` by `jump` lattice units; zero when the
    /// target leaves the lattice.
    pub fn rate(&self, idx: usize, jump: i64) -> f64 {
        let target = idx as i64 + jump;
        if target < 0 || target >= self.len() as i64 {
            return 0.0;
        }
        let p = self.momentum(idx);
        let p2 = self.momentum(target as usize);
        self.base_rate.eval(p, p2) * (-0.5 * self.beta * (self.energy(p2) - self.energy(p))).exp()
    }

    /// Full rate table `table[site][jump_index]`, jump order as in
    /// [`Self::jumps`]; off-lattice entries are zero.
    pub fn rate_table(&self) -> Vec<Vec<f64>> {
        (0..self.len())
            .map(|idx| self.jumps.iter().map(|&d| self.rate(idx, d)).collect())
            .collect()
    }

    /// Worst relative violation of the detailed-balance identity over every
    /// admissible `(p, Δ)` pair.
    pub fn detailed_balance_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for idx in 0..self.len() {
            let p = self.momentum(idx);
            for &jump in &self.jumps {
                let target = idx as i64 + jump;
                if target < 0 || target >= self.len() as i64 {
                    continue;
                }
                let p2 = self.momentum(target as usize);
                let lhs = self.rate(idx, jump) * (-self.beta * self.energy(p)).exp();
                let rhs = self.rate(target as usize, -jump) * (-self.beta * self.energy(p2)).exp();
                worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE));
            }
        }
        worst
    }

    /// Gibbs populations `f_β(p) ∝ exp(−βE(p))`, unit mass on the lattice.
    pub fn gibbs_state(&self) -> PopulationGrid {
        let mut f: Vec<f64> = (0..self.len())
            .map(|i| (-self.beta * self.energy(self.momentum(i))).exp())
            .collect();
        let z: f64 = f.iter().sum();
        for v in &mut f {
            *v /= z;
        }
        PopulationGrid { f }
    }

    /// Per-site net probability flux under the master equation, normalized by
    /// `max f`: `|Σ_Δ W(p−Δ,Δ)f(p−Δ) − W(p,Δ)f(p)| / max f`.
    pub fn stationarity_profile(&self, f: &PopulationGrid) -> Result<Vec<f64>, KineticsError> {
        self.check_len(f)?;
        let fmax = f.f.iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let mut profile = Vec::with_capacity(self.len());
        for idx in 0..self.len() {
            let mut net = 0.0f64;
            for &jump in &self.jumps {
                let source = idx as i64 - jump;
                if source >= 0 && source < self.len() as i64 {
                    net += self.rate(source as usize, jump) * f.f[source as usize];
                }
                net -= self.rate(idx, jump) * f.f[idx];
            }
            profile.push(net.abs() / fmax);
        }
        Ok(profile)
    }

    /// Largest entry of [`Self::stationarity_profile`].
    pub fn stationarity_residual(&self, f: &PopulationGrid) -> Result<f64, KineticsError> {
        Ok(self.stationarity_profile(f)?.into_iter().fold(0.0, f64::max))
    }

    /// Free energy `F[f] = Σ f (E + β⁻¹ log f)` with `0 log 0 = 0`.
    /// For `β = 0` the energy term is dropped (pure negative entropy).
    pub fn free_energy(&self, f: &PopulationGrid) -> f64 {
        let mut total = 0.0;
        for (i, &fi) in f.f.iter().enumerate() {
            if fi > 0.0 {
                let energy_term = if self.beta > 0.0 {
                    self.energy(self.momentum(i)) + fi.ln() / self.beta
                } else {
                    fi.ln()
                };
                total += fi * energy_term;
            }
        }
        total
    }

    fn check_len(&self, f: &PopulationGrid) -> Result<(), KineticsError> {
        if f.f.len() != self.len() {
            return Err(KineticsError::SizeMismatch { got: f.f.len(), want: self.len() });
        }
        Ok(())
    }

    fn exit_rate_bound(&self) -> f64 {
        let mut worst = 0.0f64;
        for idx in 0..self.len() {
            let total: f64 = self.jumps.iter().map(|&d| self.rate(idx, d)).sum();
            worst = worst.max(total);
        }
        worst
    }

    /// Evolve the populations by the explicit flux-form master equation.
    pub fn evolve(&self, f0: &PopulationGrid, opts: &EvolveOptions) -> Result<Evolution, KineticsError> {
        self.check_len(f0)?;
        let mass0 = f0.mass();
        if (mass0 - 1.0).abs() > 1e-9 {
            return Err(KineticsError::NotNormalized(mass0));
        }
        let gibbs = self.gibbs_state();
        let n = self.len();
        // positivity is guaranteed when dt × (total exit rate) < 1
        let mut dt = opts.dt_safety / self.exit_rate_bound().max(f64::MIN_POSITIVE);
        let mut f = f0.f.clone();
        let mut t = 0.0f64;
        let mut retries = 0usize;
        let mut log = Vec::new();
        let mut next = vec![0.0f64; n];
        let mut steps_since_log = usize::MAX / 2;

        while t < opts.horizon {
            let step_dt = dt.min(opts.horizon - t);
            next.copy_from_slice(&f);
            for idx in 0..n {
                for &jump in &self.jumps {
                    if jump <= 0 {
                        continue;
                    }
                    let target = idx as i64 + jump;
                    if target < 0 || target >= n as i64 {
                        continue;
                    }
                    let target = target as usize;
                    // directed edge handled once; antisymmetric flux keeps
                    // the pairwise-cancellation structure
                    let flux =
                        step_dt * (self.rate(idx, jump) * f[idx] - self.rate(target, -jump) * f[target]);
                    next[idx] -= flux;
                    next[target] += flux;
                }
            }
            let mass: f64 = next.iter().sum();
            let negative = next.iter().any(|v| *v < 0.0);
            if negative || (mass - 1.0).abs() > 1e-9 {
                retries += 1;
                if retries > opts.max_retries {
                    return Err(KineticsError::Unstable(retries));
                }
                dt *= 0.5;
                continue;
            }
            std::mem::swap(&mut f, &mut next);
            t += step_dt;
            steps_since_log += 1;
            if steps_since_log >= opts.log_every {
                steps_since_log = 0;
                let grid = PopulationGrid { f: f.clone() };
                log.push(EvolveLogEntry {
                    t,
                    mass,
                    l1_to_gibbs: grid.l1_distance(&gibbs),
                    free_energy: self.free_energy(&grid),
                });
            }
        }
        let final_f = PopulationGrid { f };
        if log.last().map(|e| e.t) != Some(t) {
            let mass = final_f.mass();
            log.push(EvolveLogEntry {
                t,
                mass,
                l1_to_gibbs: final_f.l1_distance(&gibbs),
                free_energy: self.free_energy(&final_f),
            });
        }
        Ok(Evolution { final_f, log, dt_used: dt, retries })
    }

    /// Compare the Gibbs populations against the momentum-expanded Gaussian
    /// `f ∝ exp(−β(m + αp²/2m))`, matched at `p = 0`, over the window
    /// `|p| ≤ 0.1 m/√α`.
    pub fn nonrelativistic_limit(&self) -> Result<NonrelReport, KineticsError> {
        let window = 0.1 * self.mass / self.alpha.sqrt();
        let p_max = self.momentum(self.len() - 1);
        if p_max < window {
            return Err(KineticsError::WindowNotCovered(window));
        }
        let mut max_dev = 0.0f64;
        let mut points = Vec::new();
        for idx in 0..self.len() {
            let p = self.momentum(idx);
            if p.abs() > window {
                continue;
            }
            // both sides normalized to their p = 0 value
            let exact = (-self.beta * (self.energy(p) - self.mass)).exp();
            let gaussian = (-self.beta * self.alpha * p * p / (2.0 * self.mass)).exp();
            let dev = (exact / gaussian - 1.0).abs();
            max_dev = max_dev.max(dev);
            if p.abs() > 0.0 && dev > 1e-14 {
                points.push((p.abs().ln(), dev.ln()));
            }
        }
        // log-log slope of the deviation against |p|
        let slope = if points.len() >= 2 {
            let n = points.len() as f64;
            let sx: f64 = points.iter().map(|(x, _)| x).sum();
            let sy: f64 = points.iter().map(|(_, y)| y).sum();
            let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
            let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
            (n * sxy - sx * sy) / (n * sxx - sx * sx)
        } else {
            f64::NAN
        };
        let p_probe = window;
        Ok(NonrelReport {
            window,
            max_deviation: max_dev,
            loglog_slope: slope,
            theoretical_scale: self.beta * self.alpha * self.alpha * p_probe.powi(4)
                / (8.0 * self.mass.powi(3)),
        })
    }
}

/// Nonnegative populations over the lattice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PopulationGrid {
    f: Vec<f64>,
}

impl PopulationGrid {
    pub fn from_values(f: Vec<f64>) -> Result<Self, KineticsError> {
        if let Some(bad) = f.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(KineticsError::InvalidParameter { name: "population", value: *bad });
        }
        Ok(Self { f })
    }

    /// Point mass at site `idx`.
    pub fn delta(len: usize, idx: usize) -> Self {
        let mut f = vec![0.0; len];
        f[idx] = 1.0;
        Self { f }
    }

    pub fn uniform(len: usize) -> Self {
        Self { f: vec![1.0 / len as f64; len] }
    }

    pub fn values(&self) -> &[f64] {
        &self.f
    }

    pub fn mass(&self) -> f64 {
        self.f.iter().sum()
    }

    pub fn l1_distance(&self, other: &PopulationGrid) -> f64 {
        self.f.iter().zip(&other.f).map(|(a, b)| (a - b).abs()).sum()
    }

    /// Rescale to unit mass.
    pub fn normalized(mut self) -> Self {
        let m = self.mass();
        for v in &mut self.f {
            *v /= m;
        }
        self
    }

    /// Additive single-site perturbation, renormalized.
    pub fn perturbed(mut self, idx: usize, amount: f64) -> Self {
        self.f[idx] += amount;
        self.normalized()
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvolveOptions {
    pub horizon: f64,
    /// Fraction of the positivity-limit step actually taken.
    pub dt_safety: f64,
    /// Log cadence in accepted steps.
    pub log_every: usize,
    pub max_retries: usize,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        Self { horizon: 100.0, dt_safety: 0.5, log_every: 200, max_retries: 40 }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EvolveLogEntry {
    pub t: f64,
    pub mass: f64,
    pub l1_to_gibbs: f64,
    pub free_energy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Evolution {
    pub final_f: PopulationGrid,
    pub log: Vec<EvolveLogEntry>,
    pub dt_used: f64,
    pub retries: usize,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct NonrelReport {
    pub window: f64,
    pub max_deviation: f64,
    pub loglog_slope: f64,
    /// Leading Taylor-remainder scale `β α² p⁴ / (8 m³)` at the window edge.
    pub theoretical_scale: f64,
}

/// Spot-check variant of the jump process on a small three-dimensional grid.
pub mod grid3 {
    use super::*;

    /// Axis-aligned jump process on `{−P..P}³` with `E = √(m² + α|p|²)`.
    #[derive(Clone, Debug)]
    pub struct Grid3Model {
        pub half_width: usize,
        pub step: f64,
        pub mass: f64,
        pub alpha: f64,
        pub beta: f64,
        pub base_rate: BaseRate,
    }

    impl Grid3Model {
        fn side(&self) -> usize {
            2 * self.half_width + 1
        }

        fn momentum(&self, idx: usize) -> f64 {
            (idx as i64 - self.half_width as i64) as f64 * self.step
        }

        fn energy(&self, p: [f64; 3]) -> f64 {
            (self.mass * self.mass + self.alpha * (p[0] * p[0] + p[1] * p[1] + p[2] * p[2])).sqrt()
        }

        fn rate(&self, p: [f64; 3], p2: [f64; 3]) -> f64 {
            let dist2 = (0..3).map(|k| (p2[k] - p[k]) * (p2[k] - p[k])).sum::<f64>();
            let g = match self.base_rate {
                BaseRate::Unit => 1.0,
                BaseRate::Gaussian(w) => (-dist2 / (2.0 * w * w)).exp(),
            };
            g * (-0.5 * self.beta * (self.energy(p2) - self.energy(p))).exp()
        }

        /// Stationarity residual of the Gibbs populations under axis jumps
        /// `±h, ±2h`, normalized by `max f`.
        pub fn gibbs_stationarity_residual(&self) -> f64 {
            let side = self.side();
            let mut f = Vec::with_capacity(side * side * side);
            for i in 0..side {
                for j in 0..side {
                    for k in 0..side {
                        let p = [self.momentum(i), self.momentum(j), self.momentum(k)];
                        f.push((-self.beta * self.energy(p)).exp());
                    }
                }
            }
            let z: f64 = f.iter().sum();
            for v in &mut f {
                *v /= z;
            }
            let fmax = f.iter().cloned().fold(0.0, f64::max);
            let at = |i: usize, j: usize, k: usize| (i * side + j) * side + k;
            let mut worst = 0.0f64;
            for i in 0..side {
                for j in 0..side {
                    for k in 0..side {
                        let here = [i as i64, j as i64, k as i64];
                        let p = [self.momentum(i), self.momentum(j), self.momentum(k)];
                        let mut net = 0.0;
                        for axis in 0..3 {
                            for d in [-2i64, -1, 1, 2] {
                                let mut other = here;
                                other[axis] += d;
                                if other.iter().any(|&x| x < 0 || x >= side as i64) {
                                    continue;
                                }
                                let (oi, oj, ok) =
                                    (other[0] as usize, other[1] as usize, other[2] as usize);
                                let po = [self.momentum(oi), self.momentum(oj), self.momentum(ok)];
                                net += self.rate(po, p) * f[at(oi, oj, ok)];
                                net -= self.rate(p, po) * f[at(i, j, k)];
                            }
                        }
                        worst = worst.max(net.abs());
                    }
                }
            }
            worst / fmax
        }
    }
}
