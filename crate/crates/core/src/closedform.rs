//! Closed-form solvers for the degree-adjusted projections behind the
//! logic-constraint and pairwise factor kinds, plus their Jacobian-vector
//! products.
//!
//! Every solver returns a certificate recording which analytic branch
//! produced the solution and which coordinates are strictly interior. The
//! certificate alone determines the (generalized) Jacobian, so forward and
//! backward stay consistent at branch boundaries.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ClosedFormError {
    #[error("lower bound exceeds upper bound at coordinate {0}")]
    BoundViolation(usize),
    #[error("equality constraint value {rhs} lies outside the achievable range [{lo}, {hi}]")]
    Infeasible { lo: f64, hi: f64, rhs: f64 },
    #[error("expected a vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Singly-constrained bounded quadratic program:
/// minimize ½‖μ − η‖² subject to α ≤ μ ≤ β and Σ wᵢ μᵢ = B.
#[derive(Debug, Clone)]
pub struct ScbqpProblem {
    pub eta: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub weights: Vec<f64>,
    pub rhs: f64,
}

/// Which branch of a pairwise solve applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairCase {
    /// First variable strictly dominates.
    First,
    /// Second variable strictly dominates.
    Second,
    /// Both scaled variables coincide.
    Tie,
}

#[derive(Debug, Clone)]
pub enum Branch {
    /// Per-coordinate clipping; `support` marks strictly interior coordinates.
    ClipFeasible { support: Vec<bool> },
    /// Equality-tight single-constraint QP: the Jacobian restricted to the
    /// support is I − wwᵀ/(wᵀw).
    EqualityTight { support: Vec<bool>, weights: Vec<f64>, tau: f64 },
    /// Cone projection (outputs dominate inputs) composed with a box clip.
    ConeComposite { cone_support: Vec<bool>, box_support: Vec<bool>, tau: f64 },
    /// Pairwise branch. `mask` is the interiority of the two variables
    /// (of the flipped intermediate when `flipped`); `tie_mask` the
    /// interiority of the joint coordinate in the tie case.
    Pair { case: PairCase, flipped: bool, mask: [bool; 2], tie_mask: bool },
    /// Sign-conjugation of an inner certificate on masked coordinates.
    Negated { mask: Vec<bool>, inner: Box<ClosedFormCertificate> },
}

/// Branch record sufficient to evaluate the local Jacobian-vector product.
#[derive(Debug, Clone)]
pub struct ClosedFormCertificate {
    pub branch: Branch,
    pub delta: Vec<f64>,
}

fn clip(x: f64, lo: f64, hi: f64) -> f64 {
    x.max(lo).min(hi)
}

/// Projection onto box constraints α ≤ μ ≤ β.
pub fn project_box(
    eta: &[f64],
    lower: &[f64],
    upper: &[f64],
) -> Result<(Vec<f64>, ClosedFormCertificate), ClosedFormError> {
    if lower.len() != eta.len() || upper.len() != eta.len() {
        return Err(ClosedFormError::LengthMismatch { expected: eta.len(), got: lower.len().min(upper.len()) });
    }
    for (i, (lo, hi)) in lower.iter().zip(upper).enumerate() {
        if lo > hi {
            return Err(ClosedFormError::BoundViolation(i));
        }
    }
    let mu: Vec<f64> = eta.iter().zip(lower.iter().zip(upper)).map(|(&x, (&lo, &hi))| clip(x, lo, hi)).collect();
    let support = eta
        .iter()
        .zip(lower.iter().zip(upper))
        .map(|(&x, (&lo, &hi))| lo < x && x < hi)
        .collect();
    let cert = ClosedFormCertificate { branch: Branch::ClipFeasible { support }, delta: vec![1.0; eta.len()] };
    Ok((mu, cert))
}

/// Solves the singly-constrained bounded QP. The optimum has the form
/// μᵢ = clip(wᵢτ + ηᵢ) for a scalar τ, found by bisection and refined
/// algebraically on the detected support.
pub fn solve_scbqp(p: &ScbqpProblem) -> Result<(Vec<f64>, ClosedFormCertificate), ClosedFormError> {
    let d = p.eta.len();
    if p.lower.len() != d || p.upper.len() != d || p.weights.len() != d {
        return Err(ClosedFormError::LengthMismatch { expected: d, got: p.weights.len() });
    }
    for i in 0..d {
        if p.lower[i] > p.upper[i] {
            return Err(ClosedFormError::BoundViolation(i));
        }
    }
    let (mut lo_val, mut hi_val) = (0.0, 0.0);
    for i in 0..d {
        let w = p.weights[i];
        if w > 0.0 {
            lo_val += w * p.lower[i];
            hi_val += w * p.upper[i];
        } else {
            lo_val += w * p.upper[i];
            hi_val += w * p.lower[i];
        }
    }
    if p.rhs < lo_val - 1e-9 || p.rhs > hi_val + 1e-9 {
        return Err(ClosedFormError::Infeasible { lo: lo_val, hi: hi_val, rhs: p.rhs });
    }

    let g = |tau: f64| -> f64 {
        (0..d)
            .map(|i| p.weights[i] * clip(p.weights[i] * tau + p.eta[i], p.lower[i], p.upper[i]))
            .sum()
    };

    // Bracket tau by the bound-activation breakpoints.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..d {
        let w = p.weights[i];
        if w != 0.0 {
            let a = (p.lower[i] - p.eta[i]) / w;
            let b = (p.upper[i] - p.eta[i]) / w;
            lo = lo.min(a.min(b));
            hi = hi.max(a.max(b));
        }
    }
    if !lo.is_finite() {
        // All weights zero: the constraint is vacuous (feasibility was checked).
        let (mu, _) = project_box(&p.eta, &p.lower, &p.upper)?;
        let support = vec![false; d];
        let cert = ClosedFormCertificate {
            branch: Branch::EqualityTight { support, weights: p.weights.clone(), tau: 0.0 },
            delta: vec![1.0; d],
        };
        return Ok((mu, cert));
    }
    let (mut lo, mut hi) = (lo - 1.0, hi + 1.0);
    for _ in 0..200 {
        if hi - lo <= 1e-12 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if g(mid) < p.rhs {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut tau = 0.5 * (lo + hi);

    // Refine tau on the detected support so the equality holds to roundoff.
    let classify = |tau: f64| -> Vec<bool> {
        (0..d)
            .map(|i| {
                let v = p.weights[i] * tau + p.eta[i];
                p.lower[i] < v && v < p.upper[i]
            })
            .collect()
    };
    let mut support = classify(tau);
    for _ in 0..4 {
        let s2: f64 = (0..d).filter(|&i| support[i]).map(|i| p.weights[i] * p.weights[i]).sum();
        if s2 <= 0.0 {
            break;
        }
        let mut fixed = 0.0;
        let mut lin = 0.0;
        for i in 0..d {
            if support[i] {
                lin += p.weights[i] * p.eta[i];
            } else {
                let v = p.weights[i] * tau + p.eta[i];
                fixed += p.weights[i] * if v <= p.lower[i] { p.lower[i] } else { p.upper[i] };
            }
        }
        let refined = (p.rhs - fixed - lin) / s2;
        let new_support = classify(refined);
        tau = refined;
        if new_support == support {
            break;
        }
        support = new_support;
    }

    let mu: Vec<f64> =
        (0..d).map(|i| clip(p.weights[i] * tau + p.eta[i], p.lower[i], p.upper[i])).collect();
    let cert = ClosedFormCertificate {
        branch: Branch::EqualityTight { support, weights: p.weights.clone(), tau },
        delta: vec![1.0; d],
    };
    Ok((mu, cert))
}

/// JVP of the equality-tight branch: zero off the support, and
/// d − w(wᵀd)/(wᵀw) on it.
pub fn jvp_scbqp(support: &[bool], weights: &[f64], d: &[f64]) -> Vec<f64> {
    let wtw: f64 = support
        .iter()
        .zip(weights)
        .filter_map(|(&s, &w)| s.then_some(w * w))
        .sum();
    let wtd: f64 = support
        .iter()
        .zip(weights.iter().zip(d))
        .filter_map(|(&s, (&w, &x))| s.then_some(w * x))
        .sum();
    let scale = if wtw > 0.0 { wtd / wtw } else { 0.0 };
    support
        .iter()
        .zip(weights.iter().zip(d))
        .map(|(&s, (&w, &x))| if s { x - w * scale } else { 0.0 })
        .collect()
}

/// Exactly-one constraint: the degree-adjusted simplex projection.
pub fn solve_xor(eta: &[f64], delta: &[f64]) -> Result<(Vec<f64>, ClosedFormCertificate), ClosedFormError> {
    let p = ScbqpProblem {
        eta: eta.to_vec(),
        lower: vec![0.0; eta.len()],
        upper: delta.iter().map(|d| 1.0 / d).collect(),
        weights: delta.to_vec(),
        rhs: 1.0,
    };
    let (mu, mut cert) = solve_scbqp(&p)?;
    cert.delta = delta.to_vec();
    Ok((mu, cert))
}

fn clip_to_box(eta: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mu: Vec<f64> = eta.iter().zip(delta).map(|(&x, &d)| clip(x, 0.0, 1.0 / d)).collect();
    let support = eta.iter().zip(delta).map(|(&x, &d)| 0.0 < x && x < 1.0 / d).collect();
    (mu, support)
}

/// At-least-one constraint: clip if the sum constraint already holds,
/// otherwise the equality-tight simplex projection.
pub fn solve_or(eta: &[f64], delta: &[f64]) -> Result<(Vec<f64>, ClosedFormCertificate), ClosedFormError> {
    let (mu, support) = clip_to_box(eta, delta);
    let total: f64 = mu.iter().zip(delta).map(|(&m, &d)| d * m).sum();
    if total >= 1.0 {
        let cert = ClosedFormCertificate { branch: Branch::ClipFeasible { support }, delta: delta.to_vec() };
        return Ok((mu, cert));
    }
    solve_xor(eta, delta)
}

/// At most `budget` active variables (degree-adjusted).
pub fn solve_budget(
    eta: &[f64],
    delta: &[f64],
    budget: f64,
) -> Result<(Vec<f64>, ClosedFormCertificate), ClosedFormError> {
    let (mu, support) = clip_to_box(eta, delta);
    let total: f64 = mu.iter().zip(delta).map(|(&m, &d)| d * m).sum();
    if total <= budget {
        let cert = ClosedFormCertificate { branch: Branch::ClipFeasible { support }, delta: delta.to_vec() };
        return Ok((mu, cert));
    }
    let p = ScbqpProblem {
        eta: eta.to_vec(),
        lower: vec![0.0; eta.len()],
        upper: delta.iter().map(|d| 1.0 / d).collect(),
        weights: delta.to_vec(),
        rhs: budget,
    };
    let (mu, mut cert) = solve_scbqp(&p)?;
    cert.delta = delta.to_vec();
    Ok((mu, cert))
}

/// Weighted budget with non-negative costs.
pub fn solve_knapsack(
    eta: &[f64],
    delta: &[f64],
    costs: &[f64],
    budget: f64,
) -> Result<(Vec<f64>, ClosedFormCertificate), ClosedFormError> {
    if costs.len() != eta.len() {
        return Err(ClosedFormError::LengthMismatch { expected: eta.len(), got: costs.len() });
    }
    let (mu, support) = clip_to_box(eta, delta);
    let total: f64 = mu.iter().zip(delta.iter().zip(costs)).map(|(&m, (&d, &c))| c * d * m).sum();
    if total <= budget {
        let cert = ClosedFormCertificate { branch: Branch::ClipFeasible { support }, delta: delta.to_vec() };
        return Ok((mu, cert));
    }
    let p = ScbqpProblem {
        eta: eta.to_vec(),
        lower: vec![0.0; eta.len()],
        upper: delta.iter().map(|d| 1.0 / d).collect(),
        weights: delta.iter().zip(costs).map(|(&d, &c)| c * d).collect(),
        rhs: budget,
    };
    let (mu, mut cert) = solve_scbqp(&p)?;
    cert.delta = delta.to_vec();
    Ok((mu, cert))
}

/// Reinterprets masked coordinates as their negation: flip the scores,
/// solve the inner problem, and flip the solution back. The flip on
/// coordinate k maps x to 1/δₖ − x.
pub fn apply_negation(
    inner: impl FnOnce(&[f64]) -> Result<(Vec<f64>, ClosedFormCertificate), ClosedFormError>,
    mask: &[bool],
    eta: &[f64],
    delta: &[f64],
) -> Result<(Vec<f64>, ClosedFormCertificate), ClosedFormError> {
    let flipped: Vec<f64> = eta
        .iter()
        .zip(mask.iter().zip(delta))
        .map(|(&x, (&f, &d))| if f { 1.0 / d - x } else { x })
        .collect();
    let (mu_inner, cert_inner) = inner(&flipped)?;
    let mu: Vec<f64> = mu_inner
        .iter()
        .zip(mask.iter().zip(delta))
        .map(|(&x, (&f, &d))| if f { 1.0 / d - x } else { x })
        .collect();
    let cert = ClosedFormCertificate {
        branch: Branch::Negated { mask: mask.to_vec(), inner: Box::new(cert_inner) },
        delta: delta.to_vec(),
    };
    Ok((mu, cert))
}

/// Projects onto the cone {δᵢμᵢ ≤ δ_d μ_d for all inputs i}, where the last
/// coordinate is the output. A sorted sweep finds the smallest feasible
/// support; coordinates in it move to τ/δᵢ, the rest keep ηᵢ.
pub fn project_cone_a1(eta: &[f64], delta: &[f64]) -> (Vec<f64>, ClosedFormCertificate) {
    let d = eta.len();
    let last = d - 1;
    let mut order: Vec<usize> = (0..last).collect();
    order.sort_by(|&a, &b| {
        (delta[b] * eta[b]).total_cmp(&(delta[a] * eta[a])).then(a.cmp(&b))
    });
    let mut num = eta[last] / delta[last];
    let mut den = 1.0 / (delta[last] * delta[last]);
    let mut rho = 0usize;
    while rho < order.len() {
        let tau = num / den;
        let j = order[rho];
        if tau >= delta[j] * eta[j] {
            break;
        }
        num += eta[j] / delta[j];
        den += 1.0 / (delta[j] * delta[j]);
        rho += 1;
    }
    let tau = num / den;
    let mut cone_support = vec![false; d];
    cone_support[last] = true;
    for &j in &order[..rho] {
        cone_support[j] = true;
    }
    let mu: Vec<f64> = (0..d)
        .map(|i| if cone_support[i] { tau / delta[i] } else { eta[i] })
        .collect();
    let cert = ClosedFormCertificate {
        branch: Branch::ConeComposite {
            cone_support,
            box_support: vec![true; d],
            tau,
        },
        delta: delta.to_vec(),
    };
    (mu, cert)
}

/// Output-equals-OR-of-inputs factor. Sifts through three branches:
/// plain clipping, cone-then-box composition, and the equality-tight
/// problem (the simplex projection with the output negated).
pub fn solve_orout(eta: &[f64], delta: &[f64]) -> Result<(Vec<f64>, ClosedFormCertificate), ClosedFormError> {
    let d = eta.len();
    let last = d - 1;
    let in_a1 = |mu: &[f64]| -> bool {
        (0..last).all(|i| delta[i] * mu[i] <= delta[last] * mu[last] + 1e-12)
    };
    let in_a2 = |mu: &[f64]| -> bool {
        let lhs: f64 = (0..last).map(|i| delta[i] * mu[i]).sum();
        lhs >= delta[last] * mu[last] - 1e-12
    };

    let (mu_clip, support) = clip_to_box(eta, delta);
    if in_a1(&mu_clip) && in_a2(&mu_clip) {
        let cert = ClosedFormCertificate { branch: Branch::ClipFeasible { support }, delta: delta.to_vec() };
        return Ok((mu_clip, cert));
    }
    if !in_a1(&mu_clip) {
        let (mu_cone, cone_cert) = project_cone_a1(eta, delta);
        let mu: Vec<f64> = mu_cone.iter().zip(delta).map(|(&x, &dl)| clip(x, 0.0, 1.0 / dl)).collect();
        if in_a2(&mu) {
            let box_support: Vec<bool> =
                mu_cone.iter().zip(delta).map(|(&x, &dl)| 0.0 < x && x < 1.0 / dl).collect();
            let (cone_support, tau) = match cone_cert.branch {
                Branch::ConeComposite { cone_support, tau, .. } => (cone_support, tau),
                _ => unreachable!(),
            };
            let cert = ClosedFormCertificate {
                branch: Branch::ConeComposite { cone_support, box_support, tau },
                delta: delta.to_vec(),
            };
            return Ok((mu, cert));
        }
    }
    // Equality-tight: the sum constraint binds; reduces to the simplex
    // projection with the output negated.
    let mut mask = vec![false; d];
    mask[last] = true;
    apply_negation(|e| solve_xor(e, delta), &mask, eta, delta)
}

/// Converts a fully explicit pairwise parametrization (four per-variable
/// state scores, four joint-state scores in FF, FT, TF, TT order) into the
/// reduced (η₁, η₂, η₁₂) form.
pub fn pair_reparametrize(eta_m: &[f64; 4], eta_n: &[f64; 4], d1: f64, d2: f64) -> (f64, f64, f64) {
    let [m_1f, m_1t, m_2f, m_2t] = *eta_m;
    let [n_ff, n_ft, n_tf, n_tt] = *eta_n;
    let eta1 = 0.5 * (m_1t - m_1f + 1.0 / d1 + d1 * (n_tf - n_ff));
    let eta2 = 0.5 * (m_2t - m_2f + 1.0 / d2 + d2 * (n_ft - n_ff));
    let eta12 = 0.5 * (n_ff - n_ft - n_tf + n_tt);
    (eta1, eta2, eta12)
}

/// Solution of a pairwise solve: the two variable marginals and the joint.
#[derive(Debug, Clone, Copy)]
pub struct PairSolution {
    pub mu1: f64,
    pub mu2: f64,
    pub mu12: f64,
}

const PAIR_TIE_TOL: f64 = 1e-9;

fn solve_pair_nonneg(e1: f64, e2: f64, e12: f64, d1: f64, d2: f64) -> (PairSolution, PairCase, [bool; 2], bool) {
    debug_assert!(e12 >= 0.0);
    if d1 * e1 - (d2 * e2 + d2 * d2 * e12) > PAIR_TIE_TOL {
        let mu1 = clip(e1, 0.0, 1.0 / d1);
        let mu2 = clip(e2 + d2 * e12, 0.0, 1.0 / d2);
        let mask = [0.0 < d1 * mu1 && d1 * mu1 < 1.0, 0.0 < d2 * mu2 && d2 * mu2 < 1.0];
        let mu12 = (d1 * mu1).min(d2 * mu2);
        (PairSolution { mu1, mu2, mu12 }, PairCase::First, mask, false)
    } else if d2 * e2 - (d1 * e1 + d1 * d1 * e12) > PAIR_TIE_TOL {
        let mu1 = clip(e1 + d1 * e12, 0.0, 1.0 / d1);
        let mu2 = clip(e2, 0.0, 1.0 / d2);
        let mask = [0.0 < d1 * mu1 && d1 * mu1 < 1.0, 0.0 < d2 * mu2 && d2 * mu2 < 1.0];
        let mu12 = (d1 * mu1).min(d2 * mu2);
        (PairSolution { mu1, mu2, mu12 }, PairCase::Second, mask, false)
    } else {
        let raw = (d1 * d2 * d2 * e1 + d1 * d1 * d2 * e2 + d1 * d1 * d2 * d2 * e12) / (d1 * d1 + d2 * d2);
        let nu = clip(raw, 0.0, 1.0);
        let sol = PairSolution { mu1: nu / d1, mu2: nu / d2, mu12: nu };
        (sol, PairCase::Tie, [false, false], 0.0 < raw && raw < 1.0)
    }
}

/// Closed-form pairwise solve in the reduced parametrization. Negative
/// coupling is handled by a change of variable on the second coordinate.
pub fn solve_pair(
    e1: f64,
    e2: f64,
    e12: f64,
    d1: f64,
    d2: f64,
) -> (PairSolution, ClosedFormCertificate) {
    let delta = vec![d1, d2];
    if e12 >= 0.0 {
        let (sol, case, mask, tie_mask) = solve_pair_nonneg(e1, e2, e12, d1, d2);
        let cert = ClosedFormCertificate {
            branch: Branch::Pair { case, flipped: false, mask, tie_mask },
            delta,
        };
        (sol, cert)
    } else {
        let (sol_p, case, mask, tie_mask) =
            solve_pair_nonneg(e1 + d1 * e12, 1.0 / d2 - e2, -e12, d1, d2);
        let sol = PairSolution {
            mu1: sol_p.mu1,
            mu2: 1.0 / d2 - sol_p.mu2,
            mu12: d1 * sol_p.mu1 - sol_p.mu12,
        };
        let cert = ClosedFormCertificate {
            branch: Branch::Pair { case, flipped: true, mask, tie_mask },
            delta,
        };
        (sol, cert)
    }
}

/// Jacobian-vector product dispatched on the certificate branch.
///
/// Returns the gradient with respect to the variable scores, plus (for
/// pairwise branches) the gradient with respect to the coupling score.
pub fn jvp_closed_form(cert: &ClosedFormCertificate, d: &[f64]) -> (Vec<f64>, Option<f64>) {
    match &cert.branch {
        Branch::ClipFeasible { support } => (
            support.iter().zip(d).map(|(&s, &x)| if s { x } else { 0.0 }).collect(),
            None,
        ),
        Branch::EqualityTight { support, weights, .. } => (jvp_scbqp(support, weights, d), None),
        Branch::ConeComposite { cone_support, box_support, .. } => {
            // (J_box ∘ J_cone)ᵀ = J_cone ∘ J_box; both are symmetric and they
            // commute at solution points because the box mask is constant on
            // the cone support.
            let masked: Vec<f64> =
                box_support.iter().zip(d).map(|(&s, &x)| if s { x } else { 0.0 }).collect();
            let den: f64 = cone_support
                .iter()
                .zip(&cert.delta)
                .filter_map(|(&s, &dl)| s.then_some(1.0 / (dl * dl)))
                .sum();
            let num: f64 = cone_support
                .iter()
                .zip(cert.delta.iter().zip(&masked))
                .filter_map(|(&s, (&dl, &x))| s.then_some(x / dl))
                .sum();
            let t = if den > 0.0 { num / den } else { 0.0 };
            let out = cone_support
                .iter()
                .zip(cert.delta.iter().zip(&masked))
                .map(|(&s, (&dl, &x))| if s { t / dl } else { x })
                .collect();
            (out, None)
        }
        Branch::Pair { case, flipped, mask, tie_mask } => {
            let (d1, d2) = (cert.delta[0], cert.delta[1]);
            // Rows of the 2×3 Jacobian wrt (η1, η2, η12).
            let rows: [[f64; 3]; 2] = match (case, flipped) {
                (PairCase::First, false) => [[1.0, 0.0, 0.0], [0.0, 1.0, d2]],
                (PairCase::Second, false) => [[1.0, 0.0, d1], [0.0, 1.0, 0.0]],
                (PairCase::Tie, false) => {
                    let s = 1.0 / (d1 * d1 + d2 * d2);
                    [
                        [d2 * d2 * s, d1 * d2 * s, d1 * d2 * d2 * s],
                        [d1 * d2 * s, d1 * d1 * s, d1 * d1 * d2 * s],
                    ]
                }
                (PairCase::First, true) => [[1.0, 0.0, d1], [0.0, 1.0, d2]],
                (PairCase::Second, true) => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
                (PairCase::Tie, true) => {
                    let s = 1.0 / (d1 * d1 + d2 * d2);
                    [[d2 * d2 * s, -d1 * d2 * s, 0.0], [-d1 * d2 * s, d1 * d1 * s, 0.0]]
                }
            };
            let gate = |r: usize| -> f64 {
                match case {
                    PairCase::Tie => {
                        if *tie_mask {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    _ => {
                        if mask[r] {
                            1.0
                        } else {
                            0.0
                        }
                    }
                }
            };
            let dm = vec![
                gate(0) * rows[0][0] * d[0] + gate(1) * rows[1][0] * d[1],
                gate(0) * rows[0][1] * d[0] + gate(1) * rows[1][1] * d[1],
            ];
            let d12 = gate(0) * rows[0][2] * d[0] + gate(1) * rows[1][2] * d[1];
            (dm, Some(d12))
        }
        Branch::Negated { mask, inner } => {
            let flipped: Vec<f64> =
                d.iter().zip(mask).map(|(&x, &f)| if f { -x } else { x }).collect();
            let (inner_out, _) = jvp_closed_form(inner, &flipped);
            let out = inner_out.iter().zip(mask).map(|(&x, &f)| if f { -x } else { x }).collect();
            (out, None)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "coordinate {i}: {x} vs {y}");
        }
    }

    #[test]
    fn box_projection_clips() {
        let (mu, cert) = project_box(&[-0.3, 0.5, 1.7], &[0.0; 3], &[1.0; 3]).unwrap();
        assert_close(&mu, &[0.0, 0.5, 1.0], 0.0);
        match &cert.branch {
            Branch::ClipFeasible { support } => assert_eq!(support, &vec![false, true, false]),
            _ => panic!("expected clip branch"),
        }
        let (jvp, _) = jvp_closed_form(&cert, &[1.0, 1.0, 1.0]);
        assert_close(&jvp, &[0.0, 1.0, 0.0], 0.0);

        // Interior input is untouched and the JVP is the identity.
        let (mu, cert) = project_box(&[0.2, 0.8], &[0.0; 2], &[1.0; 2]).unwrap();
        assert_close(&mu, &[0.2, 0.8], 0.0);
        let (jvp, _) = jvp_closed_form(&cert, &[0.3, -0.4]);
        assert_close(&jvp, &[0.3, -0.4], 0.0);

        assert_eq!(project_box(&[0.0], &[1.0], &[0.0]), Err(ClosedFormError::BoundViolation(0)));
    }

    #[test]
    fn scbqp_matches_hand_solutions() {
        // Simplex projection instance: tau = -1/30.
        let p = ScbqpProblem {
            eta: vec![0.5, 0.3, 0.1],
            lower: vec![0.0; 3],
            upper: vec![1.0; 3],
            weights: vec![1.0; 3],
            rhs: 1.0,
        };
        let (mu, cert) = solve_scbqp(&p).unwrap();
        assert_close(&mu, &[16.0 / 30.0, 10.0 / 30.0, 4.0 / 30.0], 1e-12);
        match cert.branch {
            Branch::EqualityTight { tau, .. } => assert!((tau + 1.0 / 30.0).abs() < 1e-10),
            _ => panic!("expected equality branch"),
        }
        let s: f64 = mu.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);

        // Weighted instance: 5 tau + 2.6 = 1 so tau = -0.32.
        let p = ScbqpProblem {
            eta: vec![0.8, 0.9],
            lower: vec![0.0; 2],
            upper: vec![1.0; 2],
            weights: vec![1.0, 2.0],
            rhs: 1.0,
        };
        let (mu, cert) = solve_scbqp(&p).unwrap();
        assert_close(&mu, &[0.48, 0.26], 1e-10);
        match cert.branch {
            Branch::EqualityTight { tau, .. } => assert!((tau + 0.32).abs() < 1e-10),
            _ => panic!(),
        }

        // Already tight and interior: tau = 0, mu = eta.
        let p = ScbqpProblem {
            eta: vec![0.3, 0.4],
            lower: vec![0.0; 2],
            upper: vec![1.0; 2],
            weights: vec![1.0, 1.0],
            rhs: 0.7,
        };
        let (mu, cert) = solve_scbqp(&p).unwrap();
        assert_close(&mu, &[0.3, 0.4], 1e-12);
        match cert.branch {
            Branch::EqualityTight { tau, .. } => assert!(tau.abs() < 1e-10),
            _ => panic!(),
        }

        // Infeasible right-hand side reports the achievable range.
        let p = ScbqpProblem {
            eta: vec![0.0],
            lower: vec![0.0],
            upper: vec![1.0],
            weights: vec![1.0],
            rhs: 2.0,
        };
        match solve_scbqp(&p) {
            Err(ClosedFormError::Infeasible { lo, hi, rhs }) => {
                assert_eq!((lo, hi, rhs), (0.0, 1.0, 2.0));
            }
            other => panic!("expected infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn scbqp_jvp_projects_out_weights() {
        let support = vec![true, true, true];
        let w = vec![1.0; 3];
        let out = jvp_scbqp(&support, &w, &[1.0, 0.0, 0.0]);
        assert_close(&out, &[2.0 / 3.0, -1.0 / 3.0, -1.0 / 3.0], 1e-15);
        // Direction parallel to the weights is annihilated.
        let out = jvp_scbqp(&support, &w, &[2.0, 2.0, 2.0]);
        assert_close(&out, &[0.0, 0.0, 0.0], 1e-15);
        // Empty support gives zero.
        let out = jvp_scbqp(&[false, false], &[1.0, 1.0], &[1.0, -1.0]);
        assert_close(&out, &[0.0, 0.0], 0.0);
    }

    #[test]
    fn xor_is_the_simplex_projection() {
        let ones = vec![1.0; 3];
        let (mu, _) = solve_xor(&[0.5, 0.3, 0.1], &ones).unwrap();
        assert_close(&mu, &[16.0 / 30.0, 10.0 / 30.0, 4.0 / 30.0], 1e-12);

        let (mu, cert) = solve_xor(&[10.0, 0.0, 0.0], &ones).unwrap();
        assert_close(&mu, &[1.0, 0.0, 0.0], 1e-12);
        match &cert.branch {
            Branch::EqualityTight { support, .. } => {
                assert_eq!(support, &vec![false, false, false]);
            }
            _ => panic!(),
        }

        // Symmetric scores give the uniform point regardless of the constant.
        for c in [-3.0, 0.0, 11.5] {
            let (mu, _) = solve_xor(&[c, c, c], &ones).unwrap();
            assert_close(&mu, &[1.0 / 3.0; 3], 1e-12);
        }
    }

    #[test]
    fn xor_ignores_uniform_shifts_of_adjusted_scores() {
        // Adding c·δ to the scores leaves the solution and support unchanged.
        let delta = vec![1.0, 2f64.sqrt(), 3f64.sqrt()];
        let eta = vec![0.4, 0.1, -0.2];
        let (mu, cert) = solve_xor(&eta, &delta).unwrap();
        for c in [-0.7, 0.3, 2.0] {
            let shifted: Vec<f64> = eta.iter().zip(&delta).map(|(&e, &d)| e + c * d).collect();
            let (mu2, cert2) = solve_xor(&shifted, &delta).unwrap();
            assert_close(&mu, &mu2, 1e-9);
            match (&cert.branch, &cert2.branch) {
                (Branch::EqualityTight { support: s1, .. }, Branch::EqualityTight { support: s2, .. }) => {
                    assert_eq!(s1, s2)
                }
                _ => panic!(),
            }
        }
    }

    #[test]
    fn or_branches() {
        let ones = vec![1.0; 2];
        // Clip already satisfies the sum constraint.
        let (mu, cert) = solve_or(&[0.7, 0.4], &ones).unwrap();
        assert_close(&mu, &[0.7, 0.4], 0.0);
        assert!(matches!(cert.branch, Branch::ClipFeasible { .. }));

        // Both scores low: equality branch, the simplex projection.
        let (mu, cert) = solve_or(&[-0.3, -0.1], &ones).unwrap();
        assert_close(&mu, &[0.4, 0.6], 1e-12);
        assert!(matches!(cert.branch, Branch::EqualityTight { .. }));

        // Boundary feasibility stays on the clip branch.
        let (mu, cert) = solve_or(&[1.5, -2.0], &ones).unwrap();
        assert_close(&mu, &[1.0, 0.0], 0.0);
        assert!(matches!(cert.branch, Branch::ClipFeasible { .. }));
    }

    #[test]
    fn budget_branches() {
        let ones = vec![1.0; 2];
        let (mu, _) = solve_budget(&[0.4, -0.2], &ones, 1.0).unwrap();
        assert_close(&mu, &[0.4, 0.0], 0.0);

        let (mu, cert) = solve_budget(&[0.9, 0.8], &ones, 1.0).unwrap();
        assert_close(&mu, &[0.55, 0.45], 1e-10);
        match cert.branch {
            Branch::EqualityTight { tau, .. } => assert!((tau + 0.35).abs() < 1e-10),
            _ => panic!(),
        }

        // Budget at least the dimension is vacuous.
        let (mu, cert) = solve_budget(&[3.0, 2.0], &ones, 2.0).unwrap();
        assert_close(&mu, &[1.0, 1.0], 0.0);
        assert!(matches!(cert.branch, Branch::ClipFeasible { .. }));
    }

    #[test]
    fn knapsack_branches() {
        let ones = vec![1.0; 2];
        let (mu, _) = solve_knapsack(&[0.8, 0.9], &ones, &[1.0, 2.0], 1.0).unwrap();
        assert_close(&mu, &[0.48, 0.26], 1e-10);

        // Zero costs make the constraint vacuous.
        let (mu, cert) = solve_knapsack(&[0.8, 0.9], &ones, &[0.0, 0.0], 0.5).unwrap();
        assert_close(&mu, &[0.8, 0.9], 0.0);
        assert!(matches!(cert.branch, Branch::ClipFeasible { .. }));
    }

    #[test]
    fn knapsack_with_unit_costs_is_budget() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let d = rng.gen_range(1..=5);
            let delta: Vec<f64> = (0..d).map(|_| [1.0, 2f64.sqrt(), 3f64.sqrt()][rng.gen_range(0..3)]).collect();
            let eta: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
            let b = rng.gen_range(0.2..2.0);
            let (mu_k, _) = solve_knapsack(&eta, &delta, &vec![1.0; d], b).unwrap();
            let (mu_b, _) = solve_budget(&eta, &delta, b).unwrap();
            assert_close(&mu_k, &mu_b, 1e-12);
        }
    }

    #[test]
    fn negation_examples() {
        let ones = vec![1.0; 2];
        // NAND: OR with both inputs negated.
        let both = vec![true, true];
        let (mu, cert) = apply_negation(|e| solve_or(e, &ones), &both, &[0.9, 0.9], &ones).unwrap();
        assert_close(&mu, &[0.5, 0.5], 1e-12);
        assert!(matches!(cert.branch, Branch::Negated { .. }));

        // XOR(x1, ¬x2) forces mu1 = mu2.
        let second = vec![false, true];
        let (mu, _) = apply_negation(|e| solve_xor(e, &ones), &second, &[0.3, 0.7], &ones).unwrap();
        assert_close(&mu, &[0.5, 0.5], 1e-12);

        // Double negation is the identity transformation.
        let eta = [0.2, -0.4];
        let (mu_inner, _) = solve_or(&eta, &ones).unwrap();
        let (mu_double, _) = apply_negation(
            |e1| apply_negation(|e2| solve_or(e2, &ones), &both, e1, &ones),
            &both,
            &eta,
            &ones,
        )
        .unwrap();
        assert_close(&mu_inner, &mu_double, 1e-15);
    }

    #[test]
    fn cone_projection_sweep() {
        let ones2 = vec![1.0; 2];
        let (mu, cert) = project_cone_a1(&[0.9, 0.2], &ones2);
        assert_close(&mu, &[0.55, 0.55], 1e-12);
        match &cert.branch {
            Branch::ConeComposite { tau, .. } => assert!((tau - 0.55).abs() < 1e-12),
            _ => panic!(),
        }

        // Feasible point projects to itself.
        let (mu, cert) = project_cone_a1(&[0.1, 0.5], &ones2);
        assert_close(&mu, &[0.1, 0.5], 0.0);
        match &cert.branch {
            Branch::ConeComposite { cone_support, .. } => {
                assert_eq!(cone_support, &vec![false, true]);
            }
            _ => panic!(),
        }

        let ones3 = vec![1.0; 3];
        let (mu, _) = project_cone_a1(&[0.6, 0.5, 0.2], &ones3);
        assert_close(&mu, &[1.3 / 3.0, 1.3 / 3.0, 1.3 / 3.0], 1e-12);
    }

    #[test]
    fn cone_projection_shift_covariance() {
        // Adding c/δ to every score shifts the solution by c/δ and keeps the
        // support.
        let delta = vec![2f64.sqrt(), 1.0, 3f64.sqrt()];
        let eta = vec![0.9, -0.3, 0.1];
        let (mu, cert) = project_cone_a1(&eta, &delta);
        let c = 0.37;
        let shifted: Vec<f64> = eta.iter().zip(&delta).map(|(&e, &d)| e + c / d).collect();
        let (mu2, cert2) = project_cone_a1(&shifted, &delta);
        let expect: Vec<f64> = mu.iter().zip(&delta).map(|(&m, &d)| m + c / d).collect();
        assert_close(&mu2, &expect, 1e-12);
        match (&cert.branch, &cert2.branch) {
            (
                Branch::ConeComposite { cone_support: s1, tau: t1, .. },
                Branch::ConeComposite { cone_support: s2, tau: t2, .. },
            ) => {
                assert_eq!(s1, s2);
                assert!((t2 - t1 - c).abs() < 1e-12);
            }
            _ => panic!(),
        }
    }

    #[test]
    fn orout_branches() {
        let ones = vec![1.0; 3];
        // Interior feasible point is its own projection.
        let (mu, cert) = solve_orout(&[0.4, 0.3, 0.6], &ones).unwrap();
        assert_close(&mu, &[0.4, 0.3, 0.6], 0.0);
        assert!(matches!(cert.branch, Branch::ClipFeasible { .. }));

        // Sum constraint tight: negated simplex projection.
        let (mu, cert) = solve_orout(&[0.3, 0.4, 0.8], &ones).unwrap();
        assert_close(&mu, &[1.0 / 3.0, 13.0 / 30.0, 23.0 / 30.0], 1e-12);
        assert!(matches!(cert.branch, Branch::Negated { .. }));
        assert!((mu[0] + mu[1] - mu[2]).abs() < 1e-12);

        // Cone branch engaged, then the sum constraint holds.
        let (mu, cert) = solve_orout(&[0.9, 0.1, 0.3], &ones).unwrap();
        assert_close(&mu, &[0.6, 0.1, 0.6], 1e-12);
        assert!(matches!(cert.branch, Branch::ConeComposite { .. }));
    }

    #[test]
    fn pair_reparametrization_formulas() {
        let (e1, e2, e12) = pair_reparametrize(&[0.0; 4], &[0.0; 4], 1.0, 1.0);
        assert!((e1 - 0.5).abs() < 1e-15 && (e2 - 0.5).abs() < 1e-15 && e12.abs() < 1e-15);

        let (e1, e2, e12) = pair_reparametrize(&[0.0, 1.0, 0.0, 1.0], &[0.0; 4], 1.0, 1.0);
        assert!((e1 - 1.0).abs() < 1e-15 && (e2 - 1.0).abs() < 1e-15 && e12.abs() < 1e-15);

        let (e1, e2, e12) = pair_reparametrize(&[0.0; 4], &[0.0, 0.0, 0.0, 2.0], 1.0, 1.0);
        assert!((e1 - 0.5).abs() < 1e-15 && (e2 - 0.5).abs() < 1e-15 && (e12 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pair_cases() {
        // Case 1: first variable dominates.
        let (sol, _) = solve_pair(0.8, -0.5, 0.2, 1.0, 1.0);
        assert!((sol.mu1 - 0.8).abs() < 1e-12);
        assert!(sol.mu2.abs() < 1e-12);
        assert!(sol.mu12.abs() < 1e-12);

        // Tie case: both coordinates meet at the average.
        let (sol, cert) = solve_pair(0.2, 0.3, 0.5, 1.0, 1.0);
        assert!((sol.mu1 - 0.5).abs() < 1e-12);
        assert!((sol.mu2 - 0.5).abs() < 1e-12);
        assert!((sol.mu12 - 0.5).abs() < 1e-12);
        assert!(matches!(cert.branch, Branch::Pair { case: PairCase::Tie, .. }));

        // Zero coupling decouples the problem.
        let (sol, _) = solve_pair(0.3, 0.9, 0.0, 1.0, 1.0);
        assert!((sol.mu1 - 0.3).abs() < 1e-12);
        assert!((sol.mu2 - 0.9).abs() < 1e-12);
    }

    #[test]
    fn pair_tie_jvp_matches_rank_one_form() {
        let (_, cert) = solve_pair(0.2, 0.3, 0.5, 1.0, 1.0);
        let (dm, d12) = jvp_closed_form(&cert, &[1.0, 0.0]);
        assert!((dm[0] - 0.5).abs() < 1e-12);
        assert!((dm[1] - 0.5).abs() < 1e-12);
        assert!((d12.unwrap() - 0.5).abs() < 1e-12);
    }
}
