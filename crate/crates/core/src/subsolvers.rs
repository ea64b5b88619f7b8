//! Per-step resource allocation.
//!
//! Given an offloading action, the immediate cost of a device is the optimum
//! of a single-variable problem:
//!
//! - Local: choose the CPU frequency `f` minimizing `C/f + λ·κ·f²` subject to
//!   `f ≤ F_max`, `κ·f² ≤ E_max` and `C/f ≤ T̂`. The objective is convex with
//!   stationary point `(C / 2λκ)^(1/3)`, so the optimum is that point clamped
//!   to the feasible interval.
//! - Edge/Cloud: choose the transmit power `p` minimizing
//!   `T_fixed + (1 + λ·p)·L / r(p)` with `r(p) = B·log₂(1 + p·h/σ²)`, subject to
//!   the deadline and the per-step energy cap on the upload. The lower power
//!   bound inverts the rate formula; the upper bound is found by bisection on
//!   the (monotone) upload energy; the minimizer by golden-section search.
//!
//! [`grid_refine_oracle`] is a derivative-free brute-force minimizer used to
//! cross-check both solvers.

use std::f64::consts::LN_2;

use thiserror::Error;

use crate::env::{Action, DeviceProfile, TaskSpec};

#[derive(Debug, Error, PartialEq)]
pub enum SolverError {
    #[error("{what} must be {requirement}, got {value}")]
    Domain {
        what: &'static str,
        requirement: &'static str,
        value: f64,
    },
    #[error("zero transmit power gives an infinite upload delay")]
    ZeroPower,
    #[error("transmit power problem is only defined for offloading actions, got {0:?}")]
    NotOffloading(Action),
    #[error("empty search interval [{lo}, {hi}]")]
    EmptyInterval { lo: f64, hi: f64 },
    #[error("grid needs at least 3 points, got {0}")]
    TooFewPoints(usize),
}

/// Wireless link parameters shared by all devices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadioParams {
    pub bandwidth_hz: f64,
    pub noise_w: f64,
}

impl Default for RadioParams {
    fn default() -> Self {
        Self {
            bandwidth_hz: 1e6,
            noise_w: 1e-13,
        }
    }
}

/// Edge and cloud server capacities plus the extra cloud access delay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServerParams {
    pub f_edge: f64,
    pub f_cloud: f64,
    pub psi_s: f64,
}

impl Default for ServerParams {
    fn default() -> Self {
        Self {
            f_edge: 1e10,
            f_cloud: 1e11,
            psi_s: 0.2,
        }
    }
}

impl ServerParams {
    /// Delay that does not depend on the transmit power: server compute time,
    /// plus the access delay for the cloud.
    pub fn fixed_delay(&self, action: Action, cpu_cycles: f64) -> Result<f64, SolverError> {
        match action {
            Action::Edge => Ok(cpu_cycles / self.f_edge),
            Action::Cloud => Ok(cpu_cycles / self.f_cloud + self.psi_s),
            Action::Local => Err(SolverError::NotOffloading(action)),
        }
    }
}

/// A feasible solution of one per-step subproblem.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Allocation {
    /// CPU frequency (cycles/s) for local execution, transmit power (W) otherwise.
    pub optimizer: f64,
    pub cost: f64,
    pub delay_s: f64,
    pub energy_j: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolverResult {
    Feasible(Allocation),
    Infeasible,
}

impl SolverResult {
    pub fn is_feasible(&self) -> bool {
        matches!(self, SolverResult::Feasible(_))
    }

    pub fn allocation(&self) -> Option<&Allocation> {
        match self {
            SolverResult::Feasible(a) => Some(a),
            SolverResult::Infeasible => None,
        }
    }

    pub fn cost(&self) -> Option<f64> {
        self.allocation().map(|a| a.cost)
    }
}

/// Shannon rate `B·log₂(1 + p·h/σ²)` in bits/s.
pub fn transmission_rate(p: f64, h: f64, radio: &RadioParams) -> Result<f64, SolverError> {
    if !(p >= 0.0) {
        return Err(SolverError::Domain {
            what: "transmit power",
            requirement: "nonnegative",
            value: p,
        });
    }
    if !(h > 0.0) {
        return Err(SolverError::Domain {
            what: "path gain",
            requirement: "positive",
            value: h,
        });
    }
    Ok(rate_unchecked(p, h, radio))
}

#[inline]
fn rate_unchecked(p: f64, h: f64, radio: &RadioParams) -> f64 {
    radio.bandwidth_hz * (p * h / radio.noise_w).ln_1p() / LN_2
}

/// Upload delay `L/r` and energy `p·L/r`.
pub fn comm_delay_energy(
    p: f64,
    task: &TaskSpec,
    h: f64,
    radio: &RadioParams,
) -> Result<(f64, f64), SolverError> {
    let rate = transmission_rate(p, h, radio)?;
    if rate <= 0.0 {
        return Err(SolverError::ZeroPower);
    }
    let delay = task.size_bits / rate;
    Ok((delay, p * delay))
}

/// Local execution delay `C/f` and energy `κ·f²`.
pub fn local_delay_energy(
    f: f64,
    task: &TaskSpec,
    profile: &DeviceProfile,
) -> Result<(f64, f64), SolverError> {
    if !(f > 0.0) {
        return Err(SolverError::Domain {
            what: "CPU frequency",
            requirement: "positive",
            value: f,
        });
    }
    Ok((task.cpu_cycles / f, profile.kappa * f * f))
}

/// Optimal local CPU frequency for the head task.
pub fn solve_local_cpu(task: &TaskSpec, profile: &DeviceProfile) -> SolverResult {
    let c = task.cpu_cycles;
    let kappa = profile.kappa;
    let lambda = profile.lambda_weight;

    // Deadline gives a lower bound; capacity and energy cap an upper bound.
    let mut f_lo = c / task.deadline_s;
    while c / f_lo > task.deadline_s {
        f_lo = f_lo.next_up();
    }
    let mut f_energy = (profile.e_max / kappa).sqrt();
    while kappa * f_energy * f_energy > profile.e_max {
        f_energy = f_energy.next_down();
    }
    let f_hi = profile.f_max.min(f_energy);
    if !(f_lo <= f_hi) {
        return SolverResult::Infeasible;
    }

    let f = if lambda > 0.0 {
        (c / (2.0 * lambda * kappa)).cbrt().clamp(f_lo, f_hi)
    } else {
        f_hi
    };
    let delay_s = c / f;
    let energy_j = kappa * f * f;
    SolverResult::Feasible(Allocation {
        optimizer: f,
        cost: delay_s + lambda * energy_j,
        delay_s,
        energy_j,
    })
}

/// Iterations used when bisecting for the largest power meeting the energy cap.
pub const POWER_BISECTION_ITERS: usize = 100;
/// Relative interval tolerance of the golden-section search.
pub const GOLDEN_REL_TOL: f64 = 1e-9;
pub const GOLDEN_MAX_ITERS: usize = 200;

/// Optimal transmit power when offloading the head task to the edge or cloud.
pub fn solve_transmit_power(
    task: &TaskSpec,
    action: Action,
    h: f64,
    profile: &DeviceProfile,
    radio: &RadioParams,
    servers: &ServerParams,
) -> Result<SolverResult, SolverError> {
    let fixed = servers.fixed_delay(action, task.cpu_cycles)?;
    if !(h > 0.0) {
        return Err(SolverError::Domain {
            what: "path gain",
            requirement: "positive",
            value: h,
        });
    }
    let budget = task.deadline_s - fixed;
    if !(budget > 0.0) {
        return Ok(SolverResult::Infeasible);
    }

    let bits = task.size_bits;
    let lambda = profile.lambda_weight;
    let upload_delay = |p: f64| bits / rate_unchecked(p, h, radio);
    let upload_energy = |p: f64| p * upload_delay(p);

    // Smallest power whose rate meets the deadline, inverted in closed form.
    let exponent = bits / (radio.bandwidth_hz * budget);
    let mut p_lo = (exponent * LN_2).exp_m1() * radio.noise_w / h;
    if !p_lo.is_finite() || p_lo > profile.p_max {
        return Ok(SolverResult::Infeasible);
    }
    // Rounding can leave the closed form a hair short of the deadline.
    let mut nudges = 0;
    while fixed + upload_delay(p_lo) > task.deadline_s && nudges < 64 {
        p_lo *= 1.0 + 1e-12;
        nudges += 1;
    }

    let p_hi = if upload_energy(profile.p_max) <= profile.e_max {
        profile.p_max
    } else {
        // Upload energy increases with power; keep `lo` on the feasible side.
        let (mut lo, mut hi) = (0.0_f64, profile.p_max);
        for _ in 0..POWER_BISECTION_ITERS {
            let mid = 0.5 * (lo + hi);
            if mid > 0.0 && upload_energy(mid) <= profile.e_max {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };
    if !(p_lo <= p_hi) || fixed + upload_delay(p_lo) > task.deadline_s {
        return Ok(SolverResult::Infeasible);
    }

    let objective = |p: f64| fixed + (1.0 + lambda * p) * upload_delay(p);
    let p = golden_section_min(objective, p_lo, p_hi, GOLDEN_REL_TOL, GOLDEN_MAX_ITERS);
    let upload = upload_delay(p);
    let delay_s = fixed + upload;
    let energy_j = p * upload;
    Ok(SolverResult::Feasible(Allocation {
        optimizer: p,
        cost: delay_s + lambda * energy_j,
        delay_s,
        energy_j,
    }))
}

const INV_PHI: f64 = 0.618_033_988_749_894_8;

/// Golden-section search for the minimizer of a unimodal `f` on `[lo, hi]`.
///
/// Stops once the bracket is narrower than `rel_tol` times its magnitude or
/// after `max_iters` contractions. The endpoints are compared against the
/// final point so minima sitting on a bound are returned exactly.
pub fn golden_section_min<F>(f: F, lo: f64, hi: f64, rel_tol: f64, max_iters: usize) -> f64
where
    F: Fn(f64) -> f64,
{
    if lo >= hi {
        return lo;
    }
    let (mut a, mut b) = (lo, hi);
    let mut x1 = b - INV_PHI * (b - a);
    let mut x2 = a + INV_PHI * (b - a);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..max_iters {
        if b - a <= rel_tol * (a.abs() + b.abs()) {
            break;
        }
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - INV_PHI * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + INV_PHI * (b - a);
            f2 = f(x2);
        }
    }
    let mid = if f1 <= f2 { x1 } else { x2 };
    [lo, hi]
        .into_iter()
        .fold((mid, f(mid)), |best, x| {
            let fx = f(x);
            if fx < best.1 {
                (x, fx)
            } else {
                best
            }
        })
        .0
}

/// Exhaustive grid search on `[lo, hi]` followed by `refinements` rounds of
/// re-gridding the two cells around the best point. Returns `(argmin, min)`.
///
/// For a unimodal objective the true minimizer always lies within one grid
/// step of the best sample, so each refinement keeps it bracketed.
pub fn grid_refine_oracle<F>(
    objective: F,
    lo: f64,
    hi: f64,
    coarse_points: usize,
    refinements: usize,
) -> Result<(f64, f64), SolverError>
where
    F: Fn(f64) -> f64,
{
    if !(lo < hi) {
        return Err(SolverError::EmptyInterval { lo, hi });
    }
    if coarse_points < 3 {
        return Err(SolverError::TooFewPoints(coarse_points));
    }
    let (mut a, mut b) = (lo, hi);
    let mut best = (lo, f64::INFINITY);
    for _ in 0..=refinements {
        let step = (b - a) / (coarse_points - 1) as f64;
        let at = |k: usize| {
            if k == coarse_points - 1 {
                b
            } else {
                a + step * k as f64
            }
        };
        let mut pass_best = (0, f64::INFINITY);
        for k in 0..coarse_points {
            let fx = objective(at(k));
            if fx < pass_best.1 {
                pass_best = (k, fx);
            }
        }
        let centre = at(pass_best.0);
        if pass_best.1 < best.1 {
            best = (centre, pass_best.1);
        }
        let new_a = (centre - step).max(lo);
        let new_b = (centre + step).min(hi);
        if !(new_a < new_b) {
            break;
        }
        a = new_a;
        b = new_b;
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> DeviceProfile {
        DeviceProfile {
            f_max: 1e9,
            e_max: 1.0,
            p_max: 0.1995,
            kappa: 1e-27,
            lambda_weight: 1.0,
            distance_m: 10.0,
        }
    }

    fn task(bits: f64, cycles: f64, deadline: f64) -> TaskSpec {
        TaskSpec {
            size_bits: bits,
            cpu_cycles: cycles,
            deadline_s: deadline,
        }
    }

    fn unit_snr_radio() -> (RadioParams, f64) {
        // p·h/σ² = 1 at p = 0.1
        (
            RadioParams {
                bandwidth_hz: 1e6,
                noise_w: 1e-7,
            },
            1e-6,
        )
    }

    #[test]
    fn rate_at_known_snr() {
        let radio = RadioParams {
            bandwidth_hz: 1e6,
            noise_w: 1.0,
        };
        assert_eq!(transmission_rate(1.0, 1.0, &radio).unwrap(), 1e6);
        assert!((transmission_rate(3.0, 1.0, &radio).unwrap() - 2e6).abs() < 1e-6);
        assert_eq!(transmission_rate(0.0, 0.3, &radio).unwrap(), 0.0);
        assert!(matches!(
            transmission_rate(-0.1, 1.0, &radio),
            Err(SolverError::Domain { .. })
        ));
    }

    #[test]
    fn comm_delay_energy_direct_evaluation() {
        let (radio, h) = unit_snr_radio();
        let t = task(1e6, 1e8, 1.0);
        let (d, e) = comm_delay_energy(0.1, &t, h, &radio).unwrap();
        assert!((d - 1.0).abs() < 1e-12);
        assert!((e - 0.1).abs() < 1e-12);

        let (d2, e2) = comm_delay_energy(0.1, &task(2e6, 1e8, 1.0), h, &radio).unwrap();
        assert!((d2 - 2.0 * d).abs() < 1e-12);
        assert!((e2 - 2.0 * e).abs() < 1e-12);

        assert_eq!(
            comm_delay_energy(0.0, &t, h, &radio),
            Err(SolverError::ZeroPower)
        );
    }

    #[test]
    fn comm_energy_increases_with_power() {
        let radio = RadioParams::default();
        let t = task(1e6, 1e8, 1.0);
        let energies: Vec<f64> = (1..=20)
            .map(|k| {
                comm_delay_energy(0.01 * k as f64, &t, 1e-8, &radio)
                    .unwrap()
                    .1
            })
            .collect();
        assert!(energies.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn local_delay_energy_laws() {
        let p = profile();
        let t = task(1e6, 1e8, 1.0);
        let (d, e) = local_delay_energy(1e9, &t, &p).unwrap();
        assert!((d - 0.1).abs() < 1e-15);
        assert!((e - 1e-9).abs() < 1e-24);
        let (d2, e2) = local_delay_energy(2e9, &t, &p).unwrap();
        assert!((d2 - d / 2.0).abs() < 1e-15);
        assert!((e2 - 4.0 * e).abs() < 1e-22);
        assert!(local_delay_energy(0.0, &t, &p).is_err());
    }

    #[test]
    fn local_solver_clamps_at_capacity() {
        let r = solve_local_cpu(&task(1e6, 1e8, 1.0), &profile());
        let a = r.allocation().unwrap();
        assert_eq!(a.optimizer, 1e9);
        assert!((a.cost - (0.1 + 1e-9)).abs() < 1e-12);
    }

    #[test]
    fn local_solver_interior_point() {
        let p = DeviceProfile {
            lambda_weight: 1e8,
            ..profile()
        };
        let a = *solve_local_cpu(&task(1e6, 1e8, 1.0), &p)
            .allocation()
            .unwrap();
        assert!((a.optimizer - 7.937_005_259_840_998e8).abs() / 7.937e8 < 1e-9);
        assert!((a.cost - 0.188_988_157_484_230_97).abs() < 1e-9);
    }

    #[test]
    fn local_solver_unreachable_deadline() {
        assert!(!solve_local_cpu(&task(1e6, 1e8, 0.05), &profile()).is_feasible());
    }

    #[test]
    fn local_solver_zero_lambda_takes_upper_bound() {
        let p = DeviceProfile {
            lambda_weight: 0.0,
            ..profile()
        };
        let a = *solve_local_cpu(&task(1e6, 1e8, 1.0), &p)
            .allocation()
            .unwrap();
        assert_eq!(a.optimizer, 1e9);
        assert_eq!(a.cost, a.delay_s);
    }

    #[test]
    fn cloud_fixed_delay_beyond_deadline() {
        let servers = ServerParams {
            f_edge: 1e10,
            f_cloud: 1e10,
            psi_s: 0.11,
        };
        // C/F^c + Ψ = 0.01 + 0.11 = 0.12 > 0.1
        let r = solve_transmit_power(
            &task(1e5, 1e8, 0.1),
            Action::Cloud,
            1e-6,
            &profile(),
            &RadioParams::default(),
            &servers,
        )
        .unwrap();
        assert_eq!(r, SolverResult::Infeasible);
    }

    #[test]
    fn cloud_equals_edge_plus_access_delay() {
        let servers = ServerParams {
            f_edge: 1e10,
            f_cloud: 1e10,
            psi_s: 0.2,
        };
        let t = task(1e5, 1e8, 1.0);
        let radio = RadioParams::default();
        let solve = |a| {
            solve_transmit_power(&t, a, 1e-9, &profile(), &radio, &servers)
                .unwrap()
                .cost()
                .unwrap()
        };
        let edge = solve(Action::Edge);
        let cloud = solve(Action::Cloud);
        assert!((cloud - (edge + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn transmit_power_rejects_local() {
        let r = solve_transmit_power(
            &task(1e5, 1e8, 1.0),
            Action::Local,
            1e-6,
            &profile(),
            &RadioParams::default(),
            &ServerParams::default(),
        );
        assert_eq!(r, Err(SolverError::NotOffloading(Action::Local)));
    }

    #[test]
    fn oracle_on_known_functions() {
        let (x, _) = grid_refine_oracle(|x| (x - 2.0) * (x - 2.0), 0.0, 10.0, 101, 5).unwrap();
        assert!((x - 2.0).abs() < 1e-6);
        let (x, fx) = grid_refine_oracle(|x| x, 1.0, 3.0, 11, 3).unwrap();
        assert_eq!((x, fx), (1.0, 1.0));
        assert_eq!(
            grid_refine_oracle(|x| x, 1.0, 1.0, 11, 3),
            Err(SolverError::EmptyInterval { lo: 1.0, hi: 1.0 })
        );
        assert_eq!(
            grid_refine_oracle(|x| x, 0.0, 1.0, 2, 3),
            Err(SolverError::TooFewPoints(2))
        );
    }

    #[test]
    fn golden_section_finds_interior_and_boundary_minima() {
        let x = golden_section_min(|x| (x - 0.3).powi(2), 0.0, 1.0, 1e-12, 200);
        assert!((x - 0.3).abs() < 1e-6);
        let x = golden_section_min(|x| x, 0.5, 1.0, 1e-12, 200);
        assert_eq!(x, 0.5);
    }
}
