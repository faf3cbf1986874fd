//! Factor graph representation: variables, factor attachments, degree
//! reweighting and the scatter/gather maps between the global variable
//! vector and the stacked per-factor local copies.
//!
//! The selector matrices are never materialized. A factor's slot `k`
//! covering global variable `j` scatters as `mu[j] / delta[j]` and gathers
//! by accumulating `v[k] / delta[j]`, where `delta[j] = sqrt(deg(j))`.
//! Under this scaling the stacked scatter map is an isometry and
//! gather ∘ scatter is the identity.

use thiserror::Error;

/// Identifier of a factor: its insertion position.
pub type FactorId = usize;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph is finalized; no further mutation is allowed")]
    Finalized,
    #[error("graph is not finalized")]
    NotFinalized,
    #[error("add_variables requires n >= 1")]
    EmptyAllocation,
    #[error("factor references variable {0} but the graph has {1} variables")]
    VariableOutOfRange(usize, usize),
    #[error("factor lists variable {0} more than once")]
    DuplicateVariable(usize),
    #[error("factor arity mismatch: {0}")]
    ArityMismatch(String),
    #[error("invalid factor parameter: {0}")]
    InvalidParameter(String),
    #[error("graph has no factors")]
    NoFactors,
    #[error("variable {0} is not covered by any factor")]
    UncoveredVariable(usize),
    #[error("expected a vector of length {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("unknown factor id {0}")]
    UnknownFactor(usize),
}

/// Coupling score parametrization of a pairwise factor.
///
/// `Scalar` scores the joint both-on state; `Joint` carries one score per
/// joint state in the order (FF, FT, TF, TT).
#[derive(Debug, Clone, PartialEq)]
pub enum PairCoupling {
    Scalar(f64),
    Joint([f64; 4]),
}

/// Transition score parametrization of a sequence factor over S states.
///
/// `Scalar` is one score shared by every transition; `Grid` is an S×S
/// grid (row-major, from-state × to-state) shared across positions.
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionScores {
    Scalar(f64),
    Grid(Vec<f64>),
}

/// The catalogue of factor kinds.
///
/// Constraint kinds (`Xor` through `Negated`) have closed-form solvers;
/// the remaining kinds are backed by combinatorial MAP oracles. Scores
/// stored inside a kind (coupling, transition, `eta_add`) are the factor's
/// default additional scores and may be overridden per solve.
#[derive(Debug, Clone, PartialEq)]
pub enum FactorKind {
    /// Exactly one variable on.
    Xor,
    /// At least one variable on.
    Or,
    /// At most one variable on.
    AtMostOne,
    /// At most `budget` variables on.
    Budget { budget: f64 },
    /// Non-negative costs, total cost at most `budget`.
    Knapsack { costs: Vec<f64>, budget: f64 },
    /// Last variable equals the logical OR of the preceding ones.
    OrOut,
    /// Pairwise (Ising) factor over exactly two variables.
    Pair { coupling: PairCoupling },
    /// Inner constraint factor with `mask`ed variables negated.
    Negated { mask: Vec<bool>, inner: Box<FactorKind> },
    /// Linear-chain factor over L positions × `num_states` states.
    Sequence { num_states: usize, transition: TransitionScores },
    /// Spanning arborescence over (m+1)×m arcs, root arcs first.
    Tree { single_root: bool },
    /// Matching of `rows` to `cols` (rows <= cols), one column each.
    Assignment { rows: usize, cols: usize },
    /// Explicitly enumerated structures with optional additional statistics.
    Dense {
        structures: Vec<Vec<f64>>,
        additionals: Vec<Vec<f64>>,
        eta_add: Vec<f64>,
    },
}

impl FactorKind {
    /// Number of additional score entries the factor declares.
    pub fn additional_arity(&self) -> usize {
        match self {
            FactorKind::Pair { coupling: PairCoupling::Scalar(_) } => 1,
            FactorKind::Pair { coupling: PairCoupling::Joint(_) } => 4,
            FactorKind::Sequence { transition: TransitionScores::Scalar(_), .. } => 1,
            FactorKind::Sequence { transition: TransitionScores::Grid(g), .. } => g.len(),
            FactorKind::Dense { eta_add, .. } => eta_add.len(),
            _ => 0,
        }
    }

    /// Default additional scores carried by the kind itself.
    pub fn default_additional_scores(&self) -> Vec<f64> {
        match self {
            FactorKind::Pair { coupling: PairCoupling::Scalar(c) } => vec![*c],
            FactorKind::Pair { coupling: PairCoupling::Joint(j) } => j.to_vec(),
            FactorKind::Sequence { transition: TransitionScores::Scalar(c), .. } => vec![*c],
            FactorKind::Sequence { transition: TransitionScores::Grid(g), .. } => g.clone(),
            FactorKind::Dense { eta_add, .. } => eta_add.clone(),
            _ => Vec::new(),
        }
    }

    pub fn is_closed_form(&self) -> bool {
        match self {
            FactorKind::Xor
            | FactorKind::Or
            | FactorKind::AtMostOne
            | FactorKind::Budget { .. }
            | FactorKind::Knapsack { .. }
            | FactorKind::OrOut
            | FactorKind::Pair { .. } => true,
            FactorKind::Negated { inner, .. } => inner.is_closed_form(),
            _ => false,
        }
    }

    fn validate(&self, num_vars: usize) -> Result<(), GraphError> {
        match self {
            FactorKind::Xor | FactorKind::Or | FactorKind::AtMostOne => Ok(()),
            FactorKind::Budget { budget } => {
                if !budget.is_finite() || *budget < 0.0 {
                    return Err(GraphError::InvalidParameter(format!(
                        "budget must be finite and non-negative, got {budget}"
                    )));
                }
                Ok(())
            }
            FactorKind::Knapsack { costs, budget } => {
                if costs.len() != num_vars {
                    return Err(GraphError::ArityMismatch(format!(
                        "knapsack has {} costs for {} variables",
                        costs.len(),
                        num_vars
                    )));
                }
                if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
                    return Err(GraphError::InvalidParameter(
                        "knapsack costs must be finite and non-negative".into(),
                    ));
                }
                if !budget.is_finite() {
                    return Err(GraphError::InvalidParameter("knapsack budget must be finite".into()));
                }
                Ok(())
            }
            FactorKind::OrOut => {
                if num_vars < 2 {
                    return Err(GraphError::ArityMismatch(
                        "or-with-output needs at least one input and one output variable".into(),
                    ));
                }
                Ok(())
            }
            FactorKind::Pair { coupling } => {
                if num_vars != 2 {
                    return Err(GraphError::ArityMismatch(format!(
                        "pair factor covers exactly 2 variables, got {num_vars}"
                    )));
                }
                let finite = match coupling {
                    PairCoupling::Scalar(c) => c.is_finite(),
                    PairCoupling::Joint(j) => j.iter().all(|x| x.is_finite()),
                };
                if !finite {
                    return Err(GraphError::InvalidParameter("pair coupling must be finite".into()));
                }
                Ok(())
            }
            FactorKind::Negated { mask, inner } => {
                if mask.len() != num_vars {
                    return Err(GraphError::ArityMismatch(format!(
                        "negation mask has length {} for {} variables",
                        mask.len(),
                        num_vars
                    )));
                }
                if !inner.is_closed_form() || matches!(**inner, FactorKind::Pair { .. }) {
                    return Err(GraphError::InvalidParameter(
                        "negation wraps logic constraint factors only".into(),
                    ));
                }
                inner.validate(num_vars)
            }
            FactorKind::Sequence { num_states, transition } => {
                if *num_states == 0 || num_vars == 0 || num_vars % num_states != 0 {
                    return Err(GraphError::ArityMismatch(format!(
                        "sequence over {num_vars} variables is not divisible into {num_states} states"
                    )));
                }
                if let TransitionScores::Grid(g) = transition {
                    if g.len() != num_states * num_states {
                        return Err(GraphError::ArityMismatch(format!(
                            "transition grid has {} entries, expected {}",
                            g.len(),
                            num_states * num_states
                        )));
                    }
                }
                Ok(())
            }
            FactorKind::Tree { .. } => {
                let words = (num_vars as f64).sqrt().round() as usize;
                if words == 0 || words * words != num_vars {
                    return Err(GraphError::ArityMismatch(format!(
                        "tree factor needs m*m arc variables, got {num_vars}"
                    )));
                }
                Ok(())
            }
            FactorKind::Assignment { rows, cols } => {
                if *rows == 0 || *cols == 0 || rows > cols {
                    return Err(GraphError::InvalidParameter(format!(
                        "assignment needs 1 <= rows <= cols, got {rows}x{cols}"
                    )));
                }
                if rows * cols != num_vars {
                    return Err(GraphError::ArityMismatch(format!(
                        "assignment {rows}x{cols} needs {} variables, got {num_vars}",
                        rows * cols
                    )));
                }
                Ok(())
            }
            FactorKind::Dense { structures, additionals, eta_add } => {
                if structures.is_empty() {
                    return Err(GraphError::InvalidParameter("dense factor needs at least one structure".into()));
                }
                for s in structures {
                    if s.len() != num_vars {
                        return Err(GraphError::ArityMismatch(format!(
                            "dense structure has {} entries for {} variables",
                            s.len(),
                            num_vars
                        )));
                    }
                    if s.iter().any(|x| *x != 0.0 && *x != 1.0) {
                        return Err(GraphError::InvalidParameter("dense structures must be 0/1 vectors".into()));
                    }
                }
                if !additionals.is_empty() {
                    if additionals.len() != structures.len() {
                        return Err(GraphError::ArityMismatch(
                            "dense additionals must match the structure count".into(),
                        ));
                    }
                    let arity = eta_add.len();
                    if additionals.iter().any(|n| n.len() != arity) {
                        return Err(GraphError::ArityMismatch(
                            "dense additional vectors must match eta_add length".into(),
                        ));
                    }
                } else if !eta_add.is_empty() {
                    return Err(GraphError::ArityMismatch(
                        "dense eta_add given without additional statistics".into(),
                    ));
                }
                Ok(())
            }
        }
    }
}

/// One factor: a kind plus the ordered global variables it covers.
#[derive(Debug, Clone)]
pub struct FactorAttachment {
    pub kind: FactorKind,
    pub variables: Vec<usize>,
}

impl FactorAttachment {
    pub fn new(kind: FactorKind, variables: Vec<usize>) -> Self {
        FactorAttachment { kind, variables }
    }

    pub fn degree(&self) -> usize {
        self.variables.len()
    }
}

/// Variable scores plus optional per-factor overrides of additional scores.
///
/// An empty or `None` override slot means "use the scores stored in the
/// factor kind".
#[derive(Debug, Clone, Default)]
pub struct Scores {
    pub eta_m: Vec<f64>,
    pub eta_n: Vec<Option<Vec<f64>>>,
}

impl Scores {
    pub fn new(eta_m: Vec<f64>) -> Self {
        Scores { eta_m, eta_n: Vec::new() }
    }

    pub fn with_override(mut self, factor: FactorId, eta_n: Vec<f64>) -> Self {
        if self.eta_n.len() <= factor {
            self.eta_n.resize(factor + 1, None);
        }
        self.eta_n[factor] = Some(eta_n);
        self
    }

    /// Effective additional scores for `factor`.
    pub fn effective_eta_n(&self, graph: &FactorGraph, factor: FactorId) -> Vec<f64> {
        match self.eta_n.get(factor).and_then(|o| o.as_ref()) {
            Some(v) => v.clone(),
            None => graph.factor(factor).kind.default_additional_scores(),
        }
    }
}

/// The factor graph. Built incrementally, then finalized; finalization
/// computes degrees and the reweighting vector and freezes the structure.
#[derive(Debug, Clone, Default)]
pub struct FactorGraph {
    num_variables: usize,
    factors: Vec<FactorAttachment>,
    degrees: Vec<usize>,
    delta: Vec<f64>,
    finalized: bool,
}

impl FactorGraph {
    pub fn new() -> Self {
        FactorGraph::default()
    }

    pub fn num_variables(&self) -> usize {
        self.num_variables
    }

    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    pub fn factors(&self) -> &[FactorAttachment] {
        &self.factors
    }

    pub fn factor(&self, id: FactorId) -> &FactorAttachment {
        &self.factors[id]
    }

    /// Appends `n` fresh variables, returning their contiguous index range.
    pub fn add_variables(&mut self, n: usize) -> Result<std::ops::Range<usize>, GraphError> {
        if self.finalized {
            return Err(GraphError::Finalized);
        }
        if n == 0 {
            return Err(GraphError::EmptyAllocation);
        }
        let start = self.num_variables;
        self.num_variables += n;
        Ok(start..self.num_variables)
    }

    /// Appends a factor; the returned id is its position.
    pub fn attach_factor(&mut self, att: FactorAttachment) -> Result<FactorId, GraphError> {
        if self.finalized {
            return Err(GraphError::Finalized);
        }
        let mut seen = vec![false; self.num_variables];
        for &v in &att.variables {
            if v >= self.num_variables {
                return Err(GraphError::VariableOutOfRange(v, self.num_variables));
            }
            if seen[v] {
                return Err(GraphError::DuplicateVariable(v));
            }
            seen[v] = true;
        }
        att.kind.validate(att.variables.len())?;
        self.factors.push(att);
        Ok(self.factors.len() - 1)
    }

    /// Computes degrees and delta, validates coverage, and freezes the graph.
    /// Calling it again on a finalized graph is a no-op.
    pub fn finalize(&mut self) -> Result<(), GraphError> {
        if self.finalized {
            return Ok(());
        }
        if self.factors.is_empty() {
            return Err(GraphError::NoFactors);
        }
        let mut degrees = vec![0usize; self.num_variables];
        for att in &self.factors {
            for &v in &att.variables {
                degrees[v] += 1;
            }
        }
        if let Some(j) = degrees.iter().position(|&d| d == 0) {
            return Err(GraphError::UncoveredVariable(j));
        }
        self.delta = degrees.iter().map(|&d| (d as f64).sqrt()).collect();
        self.degrees = degrees;
        self.finalized = true;
        Ok(())
    }

    pub fn degrees(&self) -> &[usize] {
        &self.degrees
    }

    pub fn delta(&self) -> &[f64] {
        &self.delta
    }

    /// Per-slot delta values for one factor.
    pub fn factor_delta(&self, id: FactorId) -> Vec<f64> {
        self.factors[id].variables.iter().map(|&v| self.delta[v]).collect()
    }

    fn require_finalized(&self) -> Result<(), GraphError> {
        if self.finalized {
            Ok(())
        } else {
            Err(GraphError::NotFinalized)
        }
    }

    /// Splits a global vector into reweighted per-factor local copies.
    pub fn scatter(&self, mu: &[f64]) -> Result<Vec<Vec<f64>>, GraphError> {
        self.require_finalized()?;
        if mu.len() != self.num_variables {
            return Err(GraphError::LengthMismatch { expected: self.num_variables, got: mu.len() });
        }
        Ok(self
            .factors
            .iter()
            .map(|att| att.variables.iter().map(|&v| mu[v] / self.delta[v]).collect())
            .collect())
    }

    /// Adjoint of `scatter`: accumulates local copies back into a global
    /// vector, dividing by delta.
    pub fn gather(&self, locals: &[Vec<f64>]) -> Result<Vec<f64>, GraphError> {
        self.require_finalized()?;
        if locals.len() != self.factors.len() {
            return Err(GraphError::LengthMismatch { expected: self.factors.len(), got: locals.len() });
        }
        for (att, local) in self.factors.iter().zip(locals) {
            if local.len() != att.degree() {
                return Err(GraphError::LengthMismatch { expected: att.degree(), got: local.len() });
            }
        }
        let mut out = vec![0.0; self.num_variables];
        self.gather_into(locals, &mut out);
        Ok(out)
    }

    pub(crate) fn scatter_factor_into(&self, id: FactorId, mu: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.factors[id].variables.iter().map(|&v| mu[v] / self.delta[v]));
    }

    pub(crate) fn gather_into(&self, locals: &[Vec<f64>], out: &mut [f64]) {
        out.iter_mut().for_each(|x| *x = 0.0);
        for (att, local) in self.factors.iter().zip(locals) {
            for (&v, &x) in att.variables.iter().zip(local) {
                out[v] += x / self.delta[v];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xor_graph(n: usize) -> FactorGraph {
        let mut g = FactorGraph::new();
        g.add_variables(n).unwrap();
        g.attach_factor(FactorAttachment::new(FactorKind::Xor, (0..n).collect())).unwrap();
        g.finalize().unwrap();
        g
    }

    #[test]
    fn add_variables_allocates_contiguously() {
        let mut g = FactorGraph::new();
        assert_eq!(g.add_variables(3).unwrap(), 0..3);
        assert_eq!(g.add_variables(2).unwrap(), 3..5);
        assert_eq!(g.add_variables(0), Err(GraphError::EmptyAllocation));
    }

    #[test]
    fn mutation_after_finalize_is_rejected() {
        let mut g = xor_graph(3);
        assert_eq!(g.add_variables(1), Err(GraphError::Finalized));
        assert_eq!(
            g.attach_factor(FactorAttachment::new(FactorKind::Or, vec![0])),
            Err(GraphError::Finalized)
        );
        // Re-finalizing is a no-op.
        let delta = g.delta().to_vec();
        g.finalize().unwrap();
        assert_eq!(g.delta(), &delta[..]);
    }

    #[test]
    fn attach_validates_indices_and_arity() {
        let mut g = FactorGraph::new();
        g.add_variables(3).unwrap();
        assert_eq!(
            g.attach_factor(FactorAttachment::new(FactorKind::Xor, vec![0, 0])),
            Err(GraphError::DuplicateVariable(0))
        );
        assert_eq!(
            g.attach_factor(FactorAttachment::new(FactorKind::Xor, vec![0, 7])),
            Err(GraphError::VariableOutOfRange(7, 3))
        );
        let err = g
            .attach_factor(FactorAttachment::new(
                FactorKind::Knapsack { costs: vec![1.0, 2.0], budget: 1.0 },
                vec![0, 1, 2],
            ))
            .unwrap_err();
        assert!(matches!(err, GraphError::ArityMismatch(_)));
        let id = g.attach_factor(FactorAttachment::new(FactorKind::Xor, vec![0, 1, 2])).unwrap();
        assert_eq!(id, 0);
    }

    #[test]
    fn finalize_computes_degrees_and_rejects_uncovered() {
        let mut g = FactorGraph::new();
        g.add_variables(3).unwrap();
        g.attach_factor(FactorAttachment::new(FactorKind::Xor, vec![0, 1])).unwrap();
        assert_eq!(g.finalize(), Err(GraphError::UncoveredVariable(2)));

        let g = xor_graph(3);
        assert_eq!(g.delta(), &[1.0, 1.0, 1.0]);

        let mut g = FactorGraph::new();
        g.add_variables(2).unwrap();
        g.attach_factor(FactorAttachment::new(FactorKind::Xor, vec![0, 1])).unwrap();
        g.attach_factor(FactorAttachment::new(FactorKind::AtMostOne, vec![0, 1])).unwrap();
        g.attach_factor(FactorAttachment::new(FactorKind::Or, vec![0, 1])).unwrap();
        g.finalize().unwrap();
        assert_eq!(g.degrees(), &[3, 3]);
        assert!((g.delta()[0] - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn scatter_gather_roundtrip() {
        let mut g = FactorGraph::new();
        g.add_variables(2).unwrap();
        g.attach_factor(FactorAttachment::new(FactorKind::Or, vec![0, 1])).unwrap();
        g.attach_factor(FactorAttachment::new(FactorKind::AtMostOne, vec![0])).unwrap();
        g.finalize().unwrap();

        // Variable 0 sits in two factors, its scattered copies shrink by sqrt(2).
        let locals = g.scatter(&[1.0, 1.0]).unwrap();
        let s2 = 2f64.sqrt();
        assert!((locals[0][0] - 1.0 / s2).abs() < 1e-15);
        assert!((locals[0][1] - 1.0).abs() < 1e-15);
        assert!((locals[1][0] - 1.0 / s2).abs() < 1e-15);

        let back = g.gather(&locals).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-15);
        assert!((back[1] - 1.0).abs() < 1e-15);

        // Two single-variable factors with local values (a, b) gather to (a+b)/sqrt(2).
        let mut g = FactorGraph::new();
        g.add_variables(1).unwrap();
        g.attach_factor(FactorAttachment::new(FactorKind::Or, vec![0])).unwrap();
        g.attach_factor(FactorAttachment::new(FactorKind::Or, vec![0])).unwrap();
        g.finalize().unwrap();
        let out = g.gather(&[vec![0.25], vec![0.5]]).unwrap();
        assert!((out[0] - 0.75 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn scatter_checks_length() {
        let g = xor_graph(3);
        assert!(matches!(g.scatter(&[0.0; 2]), Err(GraphError::LengthMismatch { .. })));
    }
}
