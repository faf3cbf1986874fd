//! Active-set solver for the per-factor quadratic subproblem
//!
//!     minimize over p in the simplex:  ½‖η_M − M̃p‖² − ⟨η_N, Np⟩
//!
//! where M̃ scales each structure's assignment row k by 1/δₖ. The solver
//! only needs a MAP oracle: it grows a support of structures, solves the
//! equality-constrained system on the support, and drops blocking
//! coordinates, in the min-norm-point style.
//!
//! The bordered KKT system is maintained through a Cholesky factor of
//! B = M̄ᵀM̄ + 11ᵀ, which stays positive definite as long as the active
//! columns are affinely independent (this also covers the all-zeros
//! structure). The operator Q — the top-left block of the bordered
//! inverse — is applied through two triangular solves and is exactly the
//! quantity the backward pass needs.

use crate::linalg::{dot, Cholesky};
use crate::oracles::{MapOracle, OracleError, OracleQuery, Structure};
use thiserror::Error;

const PIVOT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ActiveSetError {
    #[error("oracle failure: {0}")]
    Oracle(#[from] OracleError),
    #[error("oracle structure has {got} variables, solver expects {expected}")]
    StructureMismatch { expected: usize, got: usize },
    #[error("score vector length {got} does not match the factor ({expected})")]
    LengthMismatch { expected: usize, got: usize },
}

/// Solver settings.
#[derive(Debug, Clone)]
pub struct SparseMapConfig {
    /// Maximum number of MAP oracle calls.
    pub max_iterations: usize,
    /// Optimality margin on the reduced cost of the incoming structure.
    pub support_tolerance: f64,
}

impl Default for SparseMapConfig {
    fn default() -> Self {
        SparseMapConfig { max_iterations: 10, support_tolerance: 1e-9 }
    }
}

/// Active support state: the structures, their degree-adjusted columns, the
/// distribution over them, and the factorization backing Q.
#[derive(Debug, Clone)]
pub struct ActiveSetState {
    structures: Vec<Structure>,
    /// Degree-adjusted assignment columns (m / δ).
    mtilde: Vec<Vec<f64>>,
    p: Vec<f64>,
    chol: Cholesky,
    delta: Vec<f64>,
}

impl ActiveSetState {
    pub fn support_size(&self) -> usize {
        self.structures.len()
    }

    pub fn distribution(&self) -> &[f64] {
        &self.p
    }

    pub fn structures(&self) -> &[Structure] {
        &self.structures
    }

    /// Applies Q to a support-sized vector.
    pub fn apply_q(&self, v: &[f64]) -> Vec<f64> {
        let bz = self.chol.solve(&vec![1.0; self.chol.dim()]);
        let t: f64 = bz.iter().sum();
        let bv = self.chol.solve(v);
        let scale = dot(&bz, v) / t;
        bv.iter().zip(&bz).map(|(x, z)| x - scale * z).collect()
    }

    /// Weighted combination of the adjusted columns: M̃ u.
    fn combine(&self, u: &[f64]) -> Vec<f64> {
        let d = self.mtilde.first().map_or(0, |c| c.len());
        let mut out = vec![0.0; d];
        for (col, &w) in self.mtilde.iter().zip(u) {
            for (o, &c) in out.iter_mut().zip(col) {
                *o += w * c;
            }
        }
        out
    }

    /// M̃ᵀ v over the active columns.
    fn project_columns(&self, v: &[f64]) -> Vec<f64> {
        self.mtilde.iter().map(|col| dot(col, v)).collect()
    }

    fn rebuild_cholesky(&self) -> Option<Cholesky> {
        Cholesky::from_gram(
            self.mtilde.len(),
            |i, j| dot(&self.mtilde[i], &self.mtilde[j]) + 1.0,
            PIVOT_TOLERANCE,
        )
    }

    /// Order-insensitive fingerprint of the active structure set, used by
    /// support-stability checks in tests.
    pub fn signature(&self) -> u64 {
        let mut keys: Vec<u64> = self
            .structures
            .iter()
            .map(|s| {
                let mut h = 0xcbf29ce484222325u64;
                for &x in &s.m {
                    h ^= (x as u64).wrapping_add(0x9e3779b97f4a7c15);
                    h = h.wrapping_mul(0x100000001b3);
                }
                h
            })
            .collect();
        keys.sort_unstable();
        let mut h = 0xcbf29ce484222325u64;
        for k in keys {
            h ^= k;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }
}

/// Solution of one subproblem solve.
#[derive(Debug, Clone)]
pub struct SparseMapSolution {
    /// μ = M̃ p̄ over the factor's variable slots.
    pub mu: Vec<f64>,
    /// ν = N p̄ over the factor's additional statistics.
    pub nu: Vec<f64>,
    pub state: ActiveSetState,
    pub converged: bool,
}

/// Runs the active-set method. `delta` holds the per-slot degree weights;
/// `warm` seeds the support from a previous solve on the same factor.
pub fn solve_sparsemap(
    oracle: &dyn MapOracle,
    eta_m: &[f64],
    eta_n: &[f64],
    delta: &[f64],
    cfg: &SparseMapConfig,
    warm: Option<ActiveSetState>,
) -> Result<SparseMapSolution, ActiveSetError> {
    let d = oracle.num_variables();
    if eta_m.len() != d || delta.len() != d {
        return Err(ActiveSetError::LengthMismatch { expected: d, got: eta_m.len() });
    }
    if eta_n.len() != oracle.additional_arity() {
        return Err(ActiveSetError::LengthMismatch {
            expected: oracle.additional_arity(),
            got: eta_n.len(),
        });
    }

    let theta = |s: &Structure| -> f64 {
        let mut v = 0.0;
        for ((&m, &dl), &e) in s.m.iter().zip(delta).zip(eta_m) {
            v += (m / dl) * e;
        }
        v + dot(&s.n, eta_n)
    };

    let mut state = match warm.filter(|w| w.delta == delta && !w.structures.is_empty()) {
        Some(w) => w,
        None => {
            // Initial MAP call at the raw scores.
            let query = OracleQuery {
                eta_m: eta_m.iter().zip(delta).map(|(&e, &dl)| e / dl).collect(),
                eta_n: eta_n.to_vec(),
            };
            let first = oracle.solve_map(&query)?;
            if first.m.len() != d {
                return Err(ActiveSetError::StructureMismatch { expected: d, got: first.m.len() });
            }
            state_from_structures(vec![first], vec![1.0], delta)
        }
    };

    let mut converged = false;
    let mut iterations = 0usize;
    loop {
        // Solve the equality-constrained problem on the current support:
        // p* = Qθ̄ + z/t with z = B⁻¹1, t = 1ᵀz.
        let theta_bar: Vec<f64> = state.structures.iter().map(theta).collect();
        let z = state.chol.solve(&vec![1.0; state.chol.dim()]);
        let t: f64 = z.iter().sum();
        let q_theta = {
            let bv = state.chol.solve(&theta_bar);
            let scale = dot(&z, &theta_bar) / t;
            bv.iter().zip(&z).map(|(x, zz)| x - scale * zz).collect::<Vec<f64>>()
        };
        let p_star: Vec<f64> = q_theta.iter().zip(&z).map(|(q, zz)| q + zz / t).collect();
        let tau = (dot(&z, &theta_bar) - 1.0) / t + 1.0;

        if p_star.iter().all(|&x| x >= -1e-12) {
            state.p = p_star.iter().map(|&x| x.max(0.0)).collect();
            let mu = state.combine(&state.p);

            if iterations >= cfg.max_iterations {
                break;
            }
            iterations += 1;

            // Reduced-cost check through the oracle.
            let query = OracleQuery {
                eta_m: eta_m.iter().zip(delta.iter().zip(&mu)).map(|(&e, (&dl, &m))| (e - m) / dl).collect(),
                eta_n: eta_n.to_vec(),
            };
            let candidate = oracle.solve_map(&query)?;
            if candidate.m.len() != d {
                return Err(ActiveSetError::StructureMismatch { expected: d, got: candidate.m.len() });
            }
            let gain = candidate.score - tau;
            if gain <= cfg.support_tolerance {
                converged = true;
                break;
            }
            if state.structures.iter().any(|s| s.m == candidate.m && s.n == candidate.n) {
                // The best improving structure is already active; nothing to add.
                converged = true;
                break;
            }
            let mtilde: Vec<f64> = candidate.m.iter().zip(delta).map(|(&m, &dl)| m / dl).collect();
            let gram: Vec<f64> = state.mtilde.iter().map(|col| dot(col, &mtilde) + 1.0).collect();
            let diag = dot(&mtilde, &mtilde) + 1.0;
            if !state.chol.try_append(&gram, diag, PIVOT_TOLERANCE) {
                // Affinely dependent column; retry from a fresh factorization
                // before giving up on this candidate.
                match state.rebuild_cholesky() {
                    Some(fresh) => {
                        state.chol = fresh;
                        if !state.chol.try_append(&gram, diag, PIVOT_TOLERANCE) {
                            break;
                        }
                    }
                    None => break,
                }
                state.structures.push(candidate);
                state.mtilde.push(mtilde);
                state.p.push(0.0);
                continue;
            }
            state.structures.push(candidate);
            state.mtilde.push(mtilde);
            state.p.push(0.0);
        } else {
            // Line search from the feasible p toward p*, dropping the first
            // blocking coordinate (lowest index on ties).
            let mut alpha = 1.0f64;
            let mut drop_idx = None;
            for (i, (&cur, &target)) in state.p.iter().zip(&p_star).enumerate() {
                if target < -1e-12 {
                    let step = cur / (cur - target);
                    if step < alpha - 1e-15 {
                        alpha = step;
                        drop_idx = Some(i);
                    }
                }
            }
            let drop_idx = match drop_idx {
                Some(i) => i,
                None => {
                    // Numerical corner: treat as feasible.
                    state.p = p_star.iter().map(|&x| x.max(0.0)).collect();
                    break;
                }
            };
            for (cur, &target) in state.p.iter_mut().zip(&p_star) {
                *cur += alpha * (target - *cur);
                if *cur < 0.0 {
                    *cur = 0.0;
                }
            }
            state.structures.remove(drop_idx);
            state.mtilde.remove(drop_idx);
            state.p.remove(drop_idx);
            state.chol.remove(drop_idx);
            if state.chol.min_diag() < PIVOT_TOLERANCE.sqrt() {
                if let Some(fresh) = state.rebuild_cholesky() {
                    state.chol = fresh;
                }
            }
            // Renormalize the distribution against drift.
            let total: f64 = state.p.iter().sum();
            if total > 0.0 {
                for x in state.p.iter_mut() {
                    *x /= total;
                }
            }
        }
    }

    let mu = state.combine(&state.p);
    let arity = oracle.additional_arity();
    let mut nu = vec![0.0; arity];
    for (s, &w) in state.structures.iter().zip(&state.p) {
        for (o, &x) in nu.iter_mut().zip(&s.n) {
            *o += w * x;
        }
    }
    Ok(SparseMapSolution { mu, nu, state, converged })
}

fn state_from_structures(structures: Vec<Structure>, p: Vec<f64>, delta: &[f64]) -> ActiveSetState {
    let mtilde: Vec<Vec<f64>> = structures
        .iter()
        .map(|s| s.m.iter().zip(delta).map(|(&m, &dl)| m / dl).collect())
        .collect();
    let chol = Cholesky::from_gram(
        mtilde.len(),
        |i, j| dot(&mtilde[i], &mtilde[j]) + 1.0,
        PIVOT_TOLERANCE,
    )
    .expect("initial support is a single structure");
    ActiveSetState { structures, mtilde, p, chol, delta: delta.to_vec() }
}

/// Jacobian-vector products at a solved subproblem:
/// d_M = M̄QM̄ᵀ d (symmetric) and d_N = N̄ᵀQM̄ᵀ d.
pub fn jvp_sparsemap(sol: &SparseMapSolution, d: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let state = &sol.state;
    let s = state.project_columns(d);
    let u = state.apply_q(&s);
    let d_m = state.combine(&u);
    let mut d_n = vec![0.0; sol.nu.len()];
    for (structure, &w) in state.structures.iter().zip(&u) {
        for (o, &x) in d_n.iter_mut().zip(&structure.n) {
            *o += w * x;
        }
    }
    (d_m, d_n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::FactorKind;
    use crate::oracles::EnumerationOracle;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "coordinate {i}: {x} vs {y}");
        }
    }

    fn xor_oracle(d: usize) -> EnumerationOracle {
        EnumerationOracle::for_kind(&FactorKind::Xor, d).unwrap()
    }

    #[test]
    fn xor_subproblem_is_sparsemax() {
        let oracle = xor_oracle(3);
        let ones = vec![1.0; 3];
        let sol =
            solve_sparsemap(&oracle, &[0.5, 0.3, 0.1], &[], &ones, &SparseMapConfig::default(), None)
                .unwrap();
        assert!(sol.converged);
        assert_close(&sol.mu, &[16.0 / 30.0, 10.0 / 30.0, 4.0 / 30.0], 1e-12);
        assert_eq!(sol.state.support_size(), 3);

        // Dominant score: singleton support.
        let sol =
            solve_sparsemap(&oracle, &[10.0, 0.0, 0.0], &[], &ones, &SparseMapConfig::default(), None)
                .unwrap();
        assert_close(&sol.mu, &[1.0, 0.0, 0.0], 1e-12);
        assert_eq!(sol.state.support_size(), 1);
    }

    #[test]
    fn single_structure_factor() {
        let oracle =
            EnumerationOracle::new(vec![Structure::new(vec![1.0, 0.0], vec![])]).unwrap();
        let ones = vec![1.0; 2];
        for eta in [[5.0, -3.0], [0.0, 0.0], [-2.0, 2.0]] {
            let sol = solve_sparsemap(&oracle, &eta, &[], &ones, &SparseMapConfig::default(), None).unwrap();
            assert_close(&sol.mu, &[1.0, 0.0], 1e-15);
            assert_eq!(sol.state.distribution(), &[1.0]);
        }
    }

    #[test]
    fn jvp_matches_sparsemax_jacobian() {
        let oracle = xor_oracle(3);
        let ones = vec![1.0; 3];
        let sol =
            solve_sparsemap(&oracle, &[0.5, 0.3, 0.1], &[], &ones, &SparseMapConfig::default(), None)
                .unwrap();
        let (d_m, d_n) = jvp_sparsemap(&sol, &[1.0, 0.0, 0.0]);
        assert_close(&d_m, &[2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0], 1e-10);
        assert!(d_n.is_empty());

        // Singleton support: zero Jacobian.
        let sol =
            solve_sparsemap(&oracle, &[10.0, 0.0, 0.0], &[], &ones, &SparseMapConfig::default(), None)
                .unwrap();
        let (d_m, _) = jvp_sparsemap(&sol, &[1.0, 1.0, -1.0]);
        assert_close(&d_m, &[0.0; 3], 1e-12);

        // Zero direction maps to zero.
        let (d_m, _) = jvp_sparsemap(&sol, &[0.0; 3]);
        assert_close(&d_m, &[0.0; 3], 0.0);
    }

    #[test]
    fn q_projection_identity_holds() {
        // Q (M̄ᵀM̄) Q = Q, checked as matrices through repeated application.
        let oracle = EnumerationOracle::for_kind(&FactorKind::Or, 3).unwrap();
        let ones = vec![1.0; 3];
        let sol =
            solve_sparsemap(&oracle, &[-0.2, -0.4, 0.1], &[], &ones, &SparseMapConfig::default(), None)
                .unwrap();
        let state = &sol.state;
        let k = state.support_size();
        for col in 0..k {
            let mut e = vec![0.0; k];
            e[col] = 1.0;
            let q_e = state.apply_q(&e);
            // A Q e where A = M̄ᵀM̄.
            let a_q_e: Vec<f64> = (0..k)
                .map(|i| (0..k).map(|j| dot(&state.mtilde[i], &state.mtilde[j]) * q_e[j]).sum())
                .collect();
            let q_a_q_e = state.apply_q(&a_q_e);
            assert_close(&q_a_q_e, &q_e, 1e-8);
        }
    }

    #[test]
    fn warm_start_reuses_support() {
        let oracle = xor_oracle(4);
        let ones = vec![1.0; 4];
        let cfg = SparseMapConfig::default();
        let sol1 = solve_sparsemap(&oracle, &[0.5, 0.4, 0.1, -0.3], &[], &ones, &cfg, None).unwrap();
        let warm = sol1.state.clone();
        // Slightly perturbed scores: the warm solve stays consistent with a
        // cold solve.
        let eta = [0.52, 0.38, 0.12, -0.28];
        let warm_sol = solve_sparsemap(&oracle, &eta, &[], &ones, &cfg, Some(warm)).unwrap();
        let cold_sol = solve_sparsemap(&oracle, &eta, &[], &ones, &cfg, None).unwrap();
        assert_close(&warm_sol.mu, &cold_sol.mu, 1e-10);

        // A flipped objective forces support changes through drop steps.
        let eta = [-0.5, -0.4, 2.0, 1.9];
        let warm_sol = solve_sparsemap(&oracle, &eta, &[], &ones, &cfg, Some(sol1.state)).unwrap();
        let cold_sol = solve_sparsemap(&oracle, &eta, &[], &ones, &cfg, None).unwrap();
        assert_close(&warm_sol.mu, &cold_sol.mu, 1e-10);
    }

    #[test]
    fn iteration_cap_returns_best_iterate() {
        let oracle = xor_oracle(6);
        let ones = vec![1.0; 6];
        let cfg = SparseMapConfig { max_iterations: 1, support_tolerance: 1e-9 };
        let sol =
            solve_sparsemap(&oracle, &[0.5, 0.49, 0.48, 0.47, 0.46, 0.45], &[], &ones, &cfg, None)
                .unwrap();
        assert!(!sol.converged);
        // Still a valid distribution.
        let total: f64 = sol.state.distribution().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn additional_scores_tilt_the_solution() {
        // Two structures sharing m-columns except additionals.
        let structures = vec![
            Structure::new(vec![1.0, 0.0], vec![1.0, 0.0]),
            Structure::new(vec![0.0, 1.0], vec![0.0, 1.0]),
        ];
        let oracle = EnumerationOracle::new(structures).unwrap();
        let ones = vec![1.0; 2];
        let sol = solve_sparsemap(&oracle, &[0.0, 0.0], &[1.0, 0.0], &ones, &SparseMapConfig::default(), None)
            .unwrap();
        // The additional score pushes mass toward the first structure.
        assert!(sol.mu[0] > sol.mu[1]);
        assert!((sol.nu[0] + sol.nu[1] - 1.0).abs() < 1e-10);
    }
}
