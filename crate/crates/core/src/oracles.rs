//! Combinatorial MAP oracles: routines returning the highest-scoring
//! structure of a factor as a vector encoding plus its score.
//!
//! All oracles break ties deterministically. `map_enumerate` prefers the
//! lowest list index; the dynamic-programming and matching oracles prefer
//! lower state/vertex indices, so that on tie-free inputs they agree with
//! enumeration exactly.
//!
//! Tree factors use a packed m×m layout: slot (i, j) is the arc from word i
//! to word j, and the diagonal slot (j, j) is the root arc into word j.

use crate::graph::{FactorKind, PairCoupling, TransitionScores};
use thiserror::Error;

/// Finite stand-in for minus infinity; keeps arithmetic on padded or
/// forbidden entries well-defined while never winning an argmax.
pub const NEG_SENTINEL: f64 = -1e18;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("structure list is empty")]
    EmptyStructureList,
    #[error("empty score grid")]
    EmptyGrid,
    #[error("assignment scores must form a square grid, got {0} entries for n={1}")]
    NonSquare(usize, usize),
    #[error("score vector length {got} does not match the oracle ({expected})")]
    QueryMismatch { expected: usize, got: usize },
    #[error("structure enumeration too large: {0} exceeds the guard")]
    EnumerationTooLarge(usize),
}

/// One structure: a 0/1 assignment `m` over the factor's variables, a real
/// vector `n` of additional statistics, and a score (filled by oracles,
/// zero on bare catalogue entries).
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub m: Vec<f64>,
    pub n: Vec<f64>,
    pub score: f64,
}

impl Structure {
    pub fn new(m: Vec<f64>, n: Vec<f64>) -> Self {
        Structure { m, n, score: 0.0 }
    }
}

/// Scores an oracle is queried with.
#[derive(Debug, Clone)]
pub struct OracleQuery {
    pub eta_m: Vec<f64>,
    pub eta_n: Vec<f64>,
}

/// A maximization oracle over some structure set.
pub trait MapOracle: Sync {
    /// Returns the highest-scoring structure for the query.
    fn solve_map(&self, query: &OracleQuery) -> Result<Structure, OracleError>;
    /// Number of variable slots.
    fn num_variables(&self) -> usize;
    /// Length of the additional-statistic vector.
    fn additional_arity(&self) -> usize;
}

/// Argmax over an explicit structure list; ties go to the lowest index.
pub fn map_enumerate(structures: &[Structure], query: &OracleQuery) -> Result<Structure, OracleError> {
    if structures.is_empty() {
        return Err(OracleError::EmptyStructureList);
    }
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for (idx, s) in structures.iter().enumerate() {
        if s.m.len() != query.eta_m.len() {
            return Err(OracleError::QueryMismatch { expected: s.m.len(), got: query.eta_m.len() });
        }
        if s.n.len() != query.eta_n.len() {
            return Err(OracleError::QueryMismatch { expected: s.n.len(), got: query.eta_n.len() });
        }
        let score = crate::linalg::dot(&s.m, &query.eta_m) + crate::linalg::dot(&s.n, &query.eta_n);
        if score > best_score {
            best_score = score;
            best = idx;
        }
    }
    let mut out = structures[best].clone();
    out.score = best_score;
    Ok(out)
}

/// Best state path for a linear chain of `L` positions over `S` states.
///
/// `unary[t * S + s]` scores state `s` at position `t`; `transition[a * S + b]`
/// scores every consecutive pair `(a, b)`. The returned `m` one-hot encodes
/// the path (length L·S); `n` holds one indicator per consecutive state pair
/// used (length (L−1)·S·S). Ties resolve to the path with lowest state
/// indices, earliest positions first.
pub fn map_viterbi(unary: &[f64], num_states: usize, transition: &[f64]) -> Result<Structure, OracleError> {
    if num_states == 0 || unary.is_empty() || unary.len() % num_states != 0 {
        return Err(OracleError::EmptyGrid);
    }
    if transition.len() != num_states * num_states {
        return Err(OracleError::QueryMismatch { expected: num_states * num_states, got: transition.len() });
    }
    let len = unary.len() / num_states;
    // value[t][s]: best score of the suffix starting at position t in state s.
    let mut value = vec![vec![0.0f64; num_states]; len];
    for s in 0..num_states {
        value[len - 1][s] = unary[(len - 1) * num_states + s];
    }
    for t in (0..len - 1).rev() {
        for s in 0..num_states {
            let mut best = f64::NEG_INFINITY;
            for next in 0..num_states {
                let v = transition[s * num_states + next] + value[t + 1][next];
                if v > best {
                    best = v;
                }
            }
            value[t][s] = unary[t * num_states + s] + best;
        }
    }
    // Forward reconstruction; strict improvement keeps the lowest state.
    let mut path = Vec::with_capacity(len);
    let mut state = 0usize;
    for s in 1..num_states {
        if value[0][s] > value[0][state] {
            state = s;
        }
    }
    path.push(state);
    for t in 0..len - 1 {
        let mut next = 0usize;
        let mut best = f64::NEG_INFINITY;
        for s in 0..num_states {
            let v = transition[state * num_states + s] + value[t + 1][s];
            if v > best {
                best = v;
                next = s;
            }
        }
        path.push(next);
        state = next;
    }

    let mut m = vec![0.0; len * num_states];
    let mut n = vec![0.0; (len - 1) * num_states * num_states];
    let mut score = 0.0;
    for (t, &s) in path.iter().enumerate() {
        m[t * num_states + s] = 1.0;
        score += unary[t * num_states + s];
    }
    for t in 0..len - 1 {
        let idx = t * num_states * num_states + path[t] * num_states + path[t + 1];
        n[idx] = 1.0;
        score += transition[path[t] * num_states + path[t + 1]];
    }
    Ok(Structure { m, n, score })
}

/// Maximum spanning arborescence over `m` words rooted at a virtual root.
///
/// `arc_scores` is an (m+1)×m grid in row-major order: row 0 holds root
/// arcs, row h > 0 the arcs out of word h; column j scores the arc into
/// word j+1. Self-arc cells (row j, column j-1 for j >= 1) are ignored.
/// The returned `m` vector covers the same grid, selecting exactly `m`
/// arcs. With `single_root`, exactly one root arc is allowed.
pub fn map_arborescence(arc_scores: &[f64], num_words: usize, single_root: bool) -> Result<Structure, OracleError> {
    if num_words == 0 || arc_scores.len() != (num_words + 1) * num_words {
        return Err(OracleError::EmptyGrid);
    }
    let m = num_words;
    // Dense score matrix over nodes 0..=m (0 = root); score[u][v] for arc u -> v.
    let mut score = vec![vec![f64::NEG_INFINITY; m + 1]; m + 1];
    for h in 0..=m {
        for j in 1..=m {
            if h != j {
                score[h][j] = arc_scores[h * m + (j - 1)].max(NEG_SENTINEL);
            }
        }
    }
    let heads = if single_root {
        let mut best: Option<(f64, Vec<usize>)> = None;
        for root_child in 1..=m {
            let mut restricted = score.clone();
            for j in 1..=m {
                if j != root_child {
                    restricted[0][j] = f64::NEG_INFINITY;
                }
            }
            let h = chu_liu_edmonds(&restricted);
            let total: f64 = (1..=m).map(|j| score[h[j]][j]).sum();
            if best.as_ref().map_or(true, |(bs, _)| total > *bs) {
                best = Some((total, h));
            }
        }
        best.unwrap().1
    } else {
        chu_liu_edmonds(&score)
    };

    let mut mvec = vec![0.0; (m + 1) * m];
    let mut total = 0.0;
    for j in 1..=m {
        let h = heads[j];
        mvec[h * m + (j - 1)] = 1.0;
        total += arc_scores[h * m + (j - 1)];
    }
    Ok(Structure { m: mvec, n: Vec::new(), score: total })
}

/// Recursive Chu-Liu-Edmonds on a dense score matrix over nodes 0..n-1 with
/// node 0 as root. `NEG_INFINITY` marks missing arcs. Returns each node's
/// head (entry 0 unused).
fn chu_liu_edmonds(score: &[Vec<f64>]) -> Vec<usize> {
    let n = score.len();
    // Best incoming arc per non-root node, lowest head on ties.
    let mut best_head = vec![0usize; n];
    for v in 1..n {
        let mut bh = usize::MAX;
        let mut bs = f64::NEG_INFINITY;
        for (u, row) in score.iter().enumerate() {
            if u != v && row[v] > bs {
                bs = row[v];
                bh = u;
            }
        }
        // A completely disconnected node cannot occur for finite inputs.
        best_head[v] = if bh == usize::MAX { 0 } else { bh };
    }
    let cycle = match find_cycle(&best_head) {
        None => return best_head,
        Some(c) => c,
    };
    let mut in_cycle = vec![false; n];
    for &v in &cycle {
        in_cycle[v] = true;
    }
    // Contract the cycle into one node, placed last in the reduced graph.
    let mut old_of = Vec::with_capacity(n);
    let mut new_of = vec![usize::MAX; n];
    for v in 0..n {
        if !in_cycle[v] {
            new_of[v] = old_of.len();
            old_of.push(v);
        }
    }
    let cnode = old_of.len();
    let nn = cnode + 1;
    let mut reduced = vec![vec![f64::NEG_INFINITY; nn]; nn];
    let mut entry_choice = vec![0usize; nn];
    let mut exit_choice = vec![0usize; nn];
    for u in 0..n {
        for v in 0..n {
            if u == v || score[u][v] == f64::NEG_INFINITY {
                continue;
            }
            match (in_cycle[u], in_cycle[v]) {
                (false, false) => {
                    if score[u][v] > reduced[new_of[u]][new_of[v]] {
                        reduced[new_of[u]][new_of[v]] = score[u][v];
                    }
                }
                (false, true) => {
                    // Entering the cycle at v: pay the arc, refund v's cycle arc.
                    let adj = score[u][v] - score[best_head[v]][v];
                    if adj > reduced[new_of[u]][cnode] {
                        reduced[new_of[u]][cnode] = adj;
                        entry_choice[new_of[u]] = v;
                    }
                }
                (true, false) => {
                    if score[u][v] > reduced[cnode][new_of[v]] {
                        reduced[cnode][new_of[v]] = score[u][v];
                        exit_choice[new_of[v]] = u;
                    }
                }
                (true, true) => {}
            }
        }
    }
    let sub = chu_liu_edmonds(&reduced);
    let mut heads = best_head;
    for v in 0..n {
        if !in_cycle[v] && v != 0 {
            let h = sub[new_of[v]];
            heads[v] = if h == cnode { exit_choice[new_of[v]] } else { old_of[h] };
        }
    }
    // Break the cycle at the vertex through which it is entered.
    let entry_vertex = entry_choice[sub[cnode]];
    heads[entry_vertex] = old_of[sub[cnode]];
    heads
}

fn find_cycle(heads: &[usize]) -> Option<Vec<usize>> {
    let n = heads.len();
    let mut color = vec![0u8; n]; // 0 unvisited, 1 in progress, 2 done
    color[0] = 2;
    for start in 1..n {
        if color[start] != 0 {
            continue;
        }
        let mut v = start;
        while color[v] == 0 {
            color[v] = 1;
            v = heads[v];
        }
        if color[v] == 1 {
            let mut cycle = vec![v];
            let mut u = heads[v];
            while u != v {
                cycle.push(u);
                u = heads[u];
            }
            return Some(cycle);
        }
        let mut u = start;
        while color[u] == 1 {
            color[u] = 2;
            u = heads[u];
        }
    }
    None
}

/// Maximum-score assignment on a square n×n grid (Kuhn-Munkres).
///
/// `scores[i * n + j]` scores assigning row i to column j. Rectangular
/// problems are padded by the caller. Returns a permutation encoding.
pub fn map_assignment(scores: &[f64], n: usize) -> Result<Structure, OracleError> {
    if n == 0 {
        return Err(OracleError::EmptyGrid);
    }
    if scores.len() != n * n {
        return Err(OracleError::NonSquare(scores.len(), n));
    }
    let row_of_col = min_cost_assignment(n, |i, j| -scores[i * n + j]);
    let mut m = vec![0.0; n * n];
    let mut total = 0.0;
    for (j, &i) in row_of_col.iter().enumerate() {
        m[i * n + j] = 1.0;
        total += scores[i * n + j];
    }
    Ok(Structure { m, n: Vec::new(), score: total })
}

/// Shortest augmenting path assignment with potentials, minimizing total
/// cost. Returns, for each column, the matched row.
fn min_cost_assignment(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![n; n + 1]; // p[j]: row matched to column j; column n is virtual
    for i in 0..n {
        p[n] = i;
        let mut j0 = n;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        let mut way = vec![n; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = n;
            for j in 0..n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == n {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == n {
                break;
            }
        }
    }
    p[..n].to_vec()
}

// ---------------------------------------------------------------------------
// Structure catalogues for the factor kinds. Used by the generic solver
// path and by tests.
// ---------------------------------------------------------------------------

const ENUMERATION_GUARD: usize = 1 << 14;

/// Enumerates the structure set of a factor kind over `d` variable slots, in
/// a documented canonical order (bit k of the counting index is variable k).
pub fn enumerate_structures(kind: &FactorKind, d: usize) -> Result<Vec<Structure>, OracleError> {
    let out = match kind {
        FactorKind::Xor => (0..d).map(|i| Structure::new(unit(d, i), vec![])).collect(),
        FactorKind::AtMostOne => {
            let mut v = vec![Structure::new(vec![0.0; d], vec![])];
            v.extend((0..d).map(|i| Structure::new(unit(d, i), vec![])));
            v
        }
        FactorKind::Or => bitvectors(d, |bits| bits.iter().any(|&b| b == 1.0))?,
        FactorKind::Budget { budget } => bitvectors(d, |bits| bits.iter().sum::<f64>() <= budget + 1e-9)?,
        FactorKind::Knapsack { costs, budget } => {
            bitvectors(d, |bits| crate::linalg::dot(bits, costs) <= budget + 1e-9)?
        }
        FactorKind::OrOut => bitvectors(d, |bits| {
            let any = bits[..d - 1].iter().any(|&b| b == 1.0);
            (bits[d - 1] == 1.0) == any
        })?,
        FactorKind::Pair { coupling } => {
            let mut v = Vec::with_capacity(4);
            for (idx, (m1, m2)) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)].iter().enumerate() {
                let n = match coupling {
                    PairCoupling::Scalar(_) => vec![m1 * m2],
                    PairCoupling::Joint(_) => unit(4, idx),
                };
                v.push(Structure::new(vec![*m1, *m2], n));
            }
            v
        }
        FactorKind::Negated { mask, inner } => {
            let mut v = enumerate_structures(inner, d)?;
            for s in &mut v {
                for (k, &flip) in mask.iter().enumerate() {
                    if flip {
                        s.m[k] = 1.0 - s.m[k];
                    }
                }
            }
            v
        }
        FactorKind::Sequence { num_states, transition } => {
            let s = *num_states;
            let len = d / s;
            s.checked_pow(len as u32)
                .filter(|&c| c <= ENUMERATION_GUARD)
                .ok_or(OracleError::EnumerationTooLarge(usize::MAX))?;
            let mut v = Vec::new();
            let mut path = vec![0usize; len];
            'outer: loop {
                let mut m = vec![0.0; d];
                for (t, &st) in path.iter().enumerate() {
                    m[t * s + st] = 1.0;
                }
                let full = sequence_full_indicators(&path, s);
                let n = reduce_sequence_stats(&full, s, transition);
                v.push(Structure::new(m, n));
                let mut t = len;
                loop {
                    if t == 0 {
                        break 'outer;
                    }
                    t -= 1;
                    path[t] += 1;
                    if path[t] < s {
                        break;
                    }
                    path[t] = 0;
                }
            }
            v
        }
        FactorKind::Tree { single_root } => {
            let words = (d as f64).sqrt().round() as usize;
            let mut v = Vec::new();
            let mut heads = vec![0usize; words + 1];
            enumerate_trees(words, 1, &mut heads, *single_root, &mut v)?;
            v
        }
        FactorKind::Assignment { rows, cols } => {
            let mut v = Vec::new();
            let mut cols_used = vec![false; *cols];
            let mut pick = vec![0usize; *rows];
            enumerate_matchings(*rows, *cols, 0, &mut cols_used, &mut pick, &mut v)?;
            v
        }
        FactorKind::Dense { structures, additionals, .. } => structures
            .iter()
            .enumerate()
            .map(|(i, m)| Structure::new(m.clone(), additionals.get(i).cloned().unwrap_or_default()))
            .collect(),
    };
    if out.len() > ENUMERATION_GUARD {
        return Err(OracleError::EnumerationTooLarge(out.len()));
    }
    Ok(out)
}

fn unit(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn bitvectors(d: usize, accept: impl Fn(&[f64]) -> bool) -> Result<Vec<Structure>, OracleError> {
    if d >= 14 {
        return Err(OracleError::EnumerationTooLarge(1 << d));
    }
    let mut out = Vec::new();
    for code in 0u64..(1 << d) {
        let bits: Vec<f64> = (0..d).map(|k| ((code >> k) & 1) as f64).collect();
        if accept(&bits) {
            out.push(Structure::new(bits, vec![]));
        }
    }
    Ok(out)
}

/// Packed tree slot for the arc head -> word (0-based words); the diagonal
/// holds root arcs.
fn tree_slot(words: usize, head: usize, word: usize) -> usize {
    // head 0 means root; stored at the diagonal cell of `word`.
    if head == 0 {
        (word - 1) * words + (word - 1)
    } else {
        (head - 1) * words + (word - 1)
    }
}

fn enumerate_trees(
    words: usize,
    word: usize,
    heads: &mut Vec<usize>,
    single_root: bool,
    out: &mut Vec<Structure>,
) -> Result<(), OracleError> {
    if out.len() > ENUMERATION_GUARD {
        return Err(OracleError::EnumerationTooLarge(out.len()));
    }
    if word > words {
        if is_arborescence(&heads[1..], words) {
            if single_root && heads[1..].iter().filter(|&&h| h == 0).count() != 1 {
                return Ok(());
            }
            let mut m = vec![0.0; words * words];
            for j in 1..=words {
                m[tree_slot(words, heads[j], j)] = 1.0;
            }
            out.push(Structure::new(m, vec![]));
        }
        return Ok(());
    }
    for h in 0..=words {
        if h == word {
            continue;
        }
        heads[word] = h;
        enumerate_trees(words, word + 1, heads, single_root, out)?;
    }
    Ok(())
}

fn is_arborescence(heads: &[usize], words: usize) -> bool {
    // Every word must reach the root by following heads without revisiting.
    for start in 1..=words {
        let mut seen = vec![false; words + 1];
        let mut v = start;
        loop {
            if v == 0 {
                break;
            }
            if seen[v] {
                return false;
            }
            seen[v] = true;
            v = heads[v - 1];
        }
    }
    true
}

fn enumerate_matchings(
    rows: usize,
    cols: usize,
    row: usize,
    cols_used: &mut Vec<bool>,
    pick: &mut Vec<usize>,
    out: &mut Vec<Structure>,
) -> Result<(), OracleError> {
    if out.len() > ENUMERATION_GUARD {
        return Err(OracleError::EnumerationTooLarge(out.len()));
    }
    if row == rows {
        let mut m = vec![0.0; rows * cols];
        for (i, &j) in pick.iter().enumerate() {
            m[i * cols + j] = 1.0;
        }
        out.push(Structure::new(m, vec![]));
        return Ok(());
    }
    for j in 0..cols {
        if cols_used[j] {
            continue;
        }
        cols_used[j] = true;
        pick[row] = j;
        enumerate_matchings(rows, cols, row + 1, cols_used, pick, out)?;
        cols_used[j] = false;
    }
    Ok(())
}

fn sequence_full_indicators(path: &[usize], s: usize) -> Vec<f64> {
    let len = path.len();
    let mut full = vec![0.0; len.saturating_sub(1) * s * s];
    for t in 0..len.saturating_sub(1) {
        full[t * s * s + path[t] * s + path[t + 1]] = 1.0;
    }
    full
}

/// Reduces full per-position transition indicators to the arity declared by
/// the transition parametrization (total count, or per-pair counts).
pub(crate) fn reduce_sequence_stats(full: &[f64], s: usize, transition: &TransitionScores) -> Vec<f64> {
    match transition {
        TransitionScores::Scalar(_) => vec![full.iter().sum()],
        TransitionScores::Grid(_) => {
            let mut n = vec![0.0; s * s];
            for (idx, &x) in full.iter().enumerate() {
                n[idx % (s * s)] += x;
            }
            n
        }
    }
}

// ---------------------------------------------------------------------------
// Oracle implementations used by the generic active-set path.
// ---------------------------------------------------------------------------

/// Oracle over an explicit structure list.
#[derive(Debug, Clone)]
pub struct EnumerationOracle {
    structures: Vec<Structure>,
    num_vars: usize,
    arity: usize,
}

impl EnumerationOracle {
    pub fn new(structures: Vec<Structure>) -> Result<Self, OracleError> {
        let first = structures.first().ok_or(OracleError::EmptyStructureList)?;
        let num_vars = first.m.len();
        let arity = first.n.len();
        Ok(EnumerationOracle { structures, num_vars, arity })
    }

    pub fn for_kind(kind: &FactorKind, d: usize) -> Result<Self, OracleError> {
        EnumerationOracle::new(enumerate_structures(kind, d)?)
    }

    pub fn structures(&self) -> &[Structure] {
        &self.structures
    }
}

impl MapOracle for EnumerationOracle {
    fn solve_map(&self, query: &OracleQuery) -> Result<Structure, OracleError> {
        map_enumerate(&self.structures, query)
    }
    fn num_variables(&self) -> usize {
        self.num_vars
    }
    fn additional_arity(&self) -> usize {
        self.arity
    }
}

/// Linear-chain oracle; reports additional statistics in the declared
/// transition parametrization.
#[derive(Debug, Clone)]
pub struct SequenceOracle {
    pub len: usize,
    pub num_states: usize,
    pub transition: TransitionScores,
}

impl MapOracle for SequenceOracle {
    fn solve_map(&self, query: &OracleQuery) -> Result<Structure, OracleError> {
        let s = self.num_states;
        // Expand declared transition scores to a shared S×S grid.
        let grid: Vec<f64> = match self.transition {
            TransitionScores::Scalar(_) => vec![query.eta_n[0]; s * s],
            TransitionScores::Grid(_) => query.eta_n.clone(),
        };
        let mut st = map_viterbi(&query.eta_m, s, &grid)?;
        st.n = reduce_sequence_stats(&st.n, s, &self.transition);
        Ok(st)
    }
    fn num_variables(&self) -> usize {
        self.len * self.num_states
    }
    fn additional_arity(&self) -> usize {
        match &self.transition {
            TransitionScores::Scalar(_) => 1,
            TransitionScores::Grid(g) => g.len(),
        }
    }
}

/// Arborescence oracle over the packed m×m arc layout.
#[derive(Debug, Clone)]
pub struct TreeOracle {
    pub num_words: usize,
    pub single_root: bool,
}

impl TreeOracle {
    /// Packed m×m scores -> (m+1)×m grid with root row first.
    fn expand(&self, packed: &[f64]) -> Vec<f64> {
        let m = self.num_words;
        let mut grid = vec![0.0; (m + 1) * m];
        for i in 0..m {
            for j in 0..m {
                if i == j {
                    grid[j] = packed[i * m + j]; // root -> word j
                } else {
                    grid[(i + 1) * m + j] = packed[i * m + j];
                }
            }
        }
        grid
    }

    fn pack(&self, grid_m: &[f64]) -> Vec<f64> {
        let m = self.num_words;
        let mut packed = vec![0.0; m * m];
        for j in 0..m {
            if grid_m[j] == 1.0 {
                packed[j * m + j] = 1.0;
            }
            for h in 1..=m {
                if h - 1 != j && grid_m[h * m + j] == 1.0 {
                    packed[(h - 1) * m + j] = 1.0;
                }
            }
        }
        packed
    }
}

impl MapOracle for TreeOracle {
    fn solve_map(&self, query: &OracleQuery) -> Result<Structure, OracleError> {
        let grid = self.expand(&query.eta_m);
        let st = map_arborescence(&grid, self.num_words, self.single_root)?;
        Ok(Structure { m: self.pack(&st.m), n: Vec::new(), score: st.score })
    }
    fn num_variables(&self) -> usize {
        self.num_words * self.num_words
    }
    fn additional_arity(&self) -> usize {
        0
    }
}

/// Matching oracle; rectangular grids are padded internally.
#[derive(Debug, Clone)]
pub struct AssignmentOracle {
    pub rows: usize,
    pub cols: usize,
}

impl MapOracle for AssignmentOracle {
    fn solve_map(&self, query: &OracleQuery) -> Result<Structure, OracleError> {
        let (r, c) = (self.rows, self.cols);
        if r == c {
            return map_assignment(&query.eta_m, r);
        }
        // Pad missing rows with zero scores; sentinel would distort potentials.
        let mut padded = vec![0.0; c * c];
        padded[..r * c].copy_from_slice(&query.eta_m[..r * c]);
        let full = map_assignment(&padded, c)?;
        let mut m = vec![0.0; r * c];
        let mut score = 0.0;
        for i in 0..r {
            for j in 0..c {
                if full.m[i * c + j] == 1.0 {
                    m[i * c + j] = 1.0;
                    score += query.eta_m[i * c + j];
                }
            }
        }
        Ok(Structure { m, n: Vec::new(), score })
    }
    fn num_variables(&self) -> usize {
        self.rows * self.cols
    }
    fn additional_arity(&self) -> usize {
        0
    }
}

// ---------------------------------------------------------------------------
// Structural validation of assignments against a factor kind.
// ---------------------------------------------------------------------------

/// Checks that `m` (0/1 over the factor's slots) is a vertex of the factor's
/// structure set, and derives the matching additional statistics where the
/// encoding determines them. For dense factors the structure must be listed.
pub fn validate_structure(kind: &FactorKind, m: &[f64]) -> Result<Vec<f64>, String> {
    if m.iter().any(|&x| x != 0.0 && x != 1.0) {
        return Err("assignment entries must be 0 or 1".into());
    }
    let d = m.len();
    let total: f64 = m.iter().sum();
    match kind {
        FactorKind::Xor => {
            if total != 1.0 {
                return Err(format!("exactly-one factor requires one active variable, got {total}"));
            }
            Ok(vec![])
        }
        FactorKind::AtMostOne => {
            if total > 1.0 {
                return Err(format!("at-most-one factor allows one active variable, got {total}"));
            }
            Ok(vec![])
        }
        FactorKind::Or => {
            if total < 1.0 {
                return Err("or factor requires at least one active variable".into());
            }
            Ok(vec![])
        }
        FactorKind::Budget { budget } => {
            if total > budget + 1e-9 {
                return Err(format!("budget factor allows {budget}, got {total}"));
            }
            Ok(vec![])
        }
        FactorKind::Knapsack { costs, budget } => {
            let cost = crate::linalg::dot(m, costs);
            if cost > budget + 1e-9 {
                return Err(format!("knapsack cost {cost} exceeds budget {budget}"));
            }
            Ok(vec![])
        }
        FactorKind::OrOut => {
            let any = m[..d - 1].iter().any(|&b| b == 1.0);
            if (m[d - 1] == 1.0) != any {
                return Err("output variable must equal the OR of the inputs".into());
            }
            Ok(vec![])
        }
        FactorKind::Pair { coupling } => {
            let (m1, m2) = (m[0], m[1]);
            Ok(match coupling {
                PairCoupling::Scalar(_) => vec![m1 * m2],
                PairCoupling::Joint(_) => unit(4, (m1 as usize) * 2 + m2 as usize),
            })
        }
        FactorKind::Negated { mask, inner } => {
            let flipped: Vec<f64> =
                m.iter().zip(mask).map(|(&x, &f)| if f { 1.0 - x } else { x }).collect();
            validate_structure(inner, &flipped)
        }
        FactorKind::Sequence { num_states, transition } => {
            let s = *num_states;
            let len = d / s;
            let mut path = Vec::with_capacity(len);
            for t in 0..len {
                let row = &m[t * s..(t + 1) * s];
                if row.iter().sum::<f64>() != 1.0 {
                    return Err(format!("sequence position {t} must have exactly one active state"));
                }
                path.push(row.iter().position(|&x| x == 1.0).unwrap());
            }
            let full = sequence_full_indicators(&path, s);
            Ok(reduce_sequence_stats(&full, s, transition))
        }
        FactorKind::Tree { single_root } => {
            let words = (d as f64).sqrt().round() as usize;
            if total != words as f64 {
                return Err("tree must select exactly one arc per word".into());
            }
            let mut heads = vec![0usize; words];
            for j in 1..=words {
                let mut found = None;
                for h in 0..=words {
                    if h != j && m[tree_slot(words, h, j)] == 1.0 {
                        if found.is_some() {
                            return Err(format!("word {j} has multiple heads"));
                        }
                        found = Some(h);
                    }
                }
                heads[j - 1] = found.ok_or(format!("word {j} has no head"))?;
            }
            if !is_arborescence(&heads, words) {
                return Err("selected arcs contain a cycle".into());
            }
            if *single_root && heads.iter().filter(|&&h| h == 0).count() != 1 {
                return Err("tree requires exactly one root arc".into());
            }
            Ok(vec![])
        }
        FactorKind::Assignment { rows, cols } => {
            for i in 0..*rows {
                let row_sum: f64 = (0..*cols).map(|j| m[i * cols + j]).sum();
                if row_sum != 1.0 {
                    return Err(format!("assignment row {i} must select exactly one column"));
                }
            }
            for j in 0..*cols {
                let col_sum: f64 = (0..*rows).map(|i| m[i * cols + j]).sum();
                if col_sum > 1.0 {
                    return Err(format!("assignment column {j} selected more than once"));
                }
            }
            Ok(vec![])
        }
        FactorKind::Dense { structures, additionals, .. } => {
            match structures.iter().position(|s| s == &m.to_vec()) {
                Some(i) => Ok(additionals.get(i).cloned().unwrap_or_default()),
                None => Err("assignment is not among the enumerated structures".into()),
            }
        }
    }
}
