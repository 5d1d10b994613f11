//! Finite-alphabet Markov noise whose transition rows may depend on the
//! current iterates, stationary-distribution polytopes of frozen kernels,
//! and the generating family of the slow measure set `D(y)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::convex_geometry::Point;
use crate::error::{Error, Result};

/// Row-sum tolerance for probability rows.
pub const ROW_TOL: f64 = 1e-12;
/// Residual tolerance `‖μP − μ‖∞` accepted for stationary rows.
pub const STATIONARY_TOL: f64 = 1e-10;

pub type RowOracle = dyn Fn(&Point, &Point, usize) -> Vec<f64> + Send + Sync;

/// Transition kernel `(x, y, s) ↦ Π(x, y, s)(·)` on `{0, …, alphabet_size − 1}`.
#[derive(Clone)]
pub struct FiniteKernel {
    alphabet_size: usize,
    row: Arc<RowOracle>,
}

impl fmt::Debug for FiniteKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FiniteKernel")
            .field("alphabet_size", &self.alphabet_size)
            .finish_non_exhaustive()
    }
}

impl FiniteKernel {
    pub fn new<F>(alphabet_size: usize, row: F) -> Result<Self>
    where
        F: Fn(&Point, &Point, usize) -> Vec<f64> + Send + Sync + 'static,
    {
        if alphabet_size == 0 {
            return Err(Error::InvalidInput("alphabet must be nonempty".into()));
        }
        Ok(FiniteKernel {
            alphabet_size,
            row: Arc::new(row),
        })
    }

    /// Kernel that ignores the iterates.
    pub fn constant(matrix: Vec<Vec<f64>>) -> Result<Self> {
        let n = matrix.len();
        if n == 0 {
            return Err(Error::InvalidInput("transition matrix has no rows".into()));
        }
        for (i, r) in matrix.iter().enumerate() {
            check_row(i, r, n)?;
        }
        let matrix = Arc::new(matrix);
        Self::new(n, move |_, _, s| matrix[s].clone())
    }

    /// Two-state kernel whose probability of staying put is
    /// `stay_lo + (stay_hi − stay_lo)·σ(gain·x₀)` with `σ` the logistic function.
    pub fn logistic_stay(stay_lo: f64, stay_hi: f64, gain: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&stay_lo) || !(0.0..=1.0).contains(&stay_hi) {
            return Err(Error::InvalidInput(
                "stay probabilities must lie in [0, 1]".into(),
            ));
        }
        Self::new(2, move |x, _, s| {
            let z = x.get(0).copied().unwrap_or(0.0) * gain;
            let stay = stay_lo + (stay_hi - stay_lo) / (1.0 + (-z).exp());
            if s == 0 {
                vec![stay, 1.0 - stay]
            } else {
                vec![1.0 - stay, stay]
            }
        })
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    /// Validated transition row.
    pub fn row(&self, x: &Point, y: &Point, s: usize) -> Result<Vec<f64>> {
        if s >= self.alphabet_size {
            return Err(Error::InvalidIndex {
                index: s,
                size: self.alphabet_size,
            });
        }
        let r = (self.row)(x, y, s);
        check_row(s, &r, self.alphabet_size)?;
        Ok(r)
    }

    /// Transition matrix with the iterates frozen at `(x, y)`.
    pub fn matrix_at(&self, x: &Point, y: &Point) -> Result<DMatrix<f64>> {
        let n = self.alphabet_size;
        let mut p = DMatrix::zeros(n, n);
        for s in 0..n {
            for (j, v) in self.row(x, y, s)?.into_iter().enumerate() {
                p[(s, j)] = v;
            }
        }
        Ok(p)
    }
}

fn check_row(index: usize, row: &[f64], n: usize) -> Result<()> {
    if row.len() != n {
        return Err(Error::NotStochastic {
            row: index,
            reason: format!("expected {n} entries, found {}", row.len()),
        });
    }
    if let Some(v) = row.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::NotStochastic {
            row: index,
            reason: format!("entry {v} is not a nonnegative number"),
        });
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(Error::NotStochastic {
            row: index,
            reason: format!("entries sum to {sum}"),
        });
    }
    Ok(())
}

/// Vertex representation of the stationary distributions of a frozen kernel:
/// one row per closed communicating class.
#[derive(Debug, Clone, PartialEq)]
pub struct StationarySet {
    pub vertices: Vec<Vec<f64>>,
}

impl StationarySet {
    pub fn is_unique(&self) -> bool {
        self.vertices.len() == 1
    }

    /// The stationary row when it is unique.
    pub fn unique(&self) -> Result<&[f64]> {
        if self.is_unique() {
            Ok(&self.vertices[0])
        } else {
            Err(Error::NonUniqueStationary {
                count: self.vertices.len(),
            })
        }
    }
}

/// `‖μP − μ‖∞`.
pub fn stationarity_residual(p: &DMatrix<f64>, mu: &[f64]) -> f64 {
    let n = mu.len();
    (0..n)
        .map(|j| {
            let flow: f64 = (0..n).map(|i| mu[i] * p[(i, j)]).sum();
            (flow - mu[j]).abs()
        })
        .fold(0.0, f64::max)
}

/// Stationary polytope of `P`.
///
/// Recurrent classes are the strongly connected components of the support
/// graph with no outgoing edge; each carries exactly one stationary row, and
/// every stationary distribution is a mixture of these.
pub fn stationary_set(p: &DMatrix<f64>) -> Result<StationarySet> {
    let n = p.nrows();
    if n == 0 || p.ncols() != n {
        return Err(Error::InvalidInput(format!(
            "transition matrix must be square and nonempty, got {}×{}",
            p.nrows(),
            p.ncols()
        )));
    }
    for i in 0..n {
        let row: Vec<f64> = p.row(i).iter().copied().collect();
        check_row(i, &row, n)?;
    }
    let adjacency: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| p[(i, j)] > 0.0).collect())
        .collect();
    let components = tarjan_scc(&adjacency);
    let mut component_of = vec![0; n];
    for (c, members) in components.iter().enumerate() {
        for &v in members {
            component_of[v] = c;
        }
    }
    let mut vertices = Vec::new();
    for (c, members) in components.iter().enumerate() {
        let closed = members
            .iter()
            .all(|&v| adjacency[v].iter().all(|&w| component_of[w] == c));
        if !closed {
            continue;
        }
        let mut members = members.clone();
        members.sort_unstable();
        let local = solve_class(p, &members)?;
        let mut mu = vec![0.0; n];
        for (&v, &m) in members.iter().zip(&local) {
            mu[v] = m;
        }
        let residual = stationarity_residual(p, &mu);
        if residual > STATIONARY_TOL {
            return Err(Error::NonConvergence {
                what: "stationary solve",
                iterations: 1,
                residual,
            });
        }
        vertices.push(mu);
    }
    vertices.sort_by(|a, b| {
        let fa = a.iter().position(|&v| v > 0.0);
        let fb = b.iter().position(|&v| v > 0.0);
        fa.cmp(&fb)
    });
    Ok(StationarySet { vertices })
}

/// Solves `μ P_CC = μ`, `Σμ = 1` on a closed class by LU with partial pivoting.
fn solve_class(p: &DMatrix<f64>, members: &[usize]) -> Result<Vec<f64>> {
    let m = members.len();
    if m == 1 {
        return Ok(vec![1.0]);
    }
    // Rows of the system are the balance equations (Pᵀ − I)μ = 0 with the last
    // one replaced by the normalization.
    let mut a = DMatrix::<f64>::zeros(m, m);
    for (r, &j) in members.iter().enumerate() {
        for (c, &i) in members.iter().enumerate() {
            a[(r, c)] = p[(i, j)] - if i == j { 1.0 } else { 0.0 };
        }
    }
    for c in 0..m {
        a[(m - 1, c)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m);
    rhs[m - 1] = 1.0;
    let sol = a.lu().solve(&rhs).ok_or(Error::NonConvergence {
        what: "stationary solve",
        iterations: 1,
        residual: f64::INFINITY,
    })?;
    Ok(sol.iter().map(|v| v.max(0.0)).collect())
}

/// Iterative Tarjan strongly-connected-components.
pub fn tarjan_scc(adjacency: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let n = adjacency.len();
    const UNSEEN: usize = usize::MAX;
    let mut index = vec![UNSEEN; n];
    let mut low = vec![0; n];
    let mut on_stack = vec![false; n];
    let mut stack = Vec::new();
    let mut components = Vec::new();
    let mut counter = 0;

    for root in 0..n {
        if index[root] != UNSEEN {
            continue;
        }
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = counter;
        low[root] = counter;
        counter += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut next)) = call.last_mut() {
            if *next < adjacency[v].len() {
                let w = adjacency[v][*next];
                *next += 1;
                if index[w] == UNSEEN {
                    index[w] = counter;
                    low[w] = counter;
                    counter += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    low[v] = low[v].min(index[w]);
                }
            } else {
                call.pop();
                if let Some(&(parent, _)) = call.last() {
                    low[parent] = low[parent].min(low[v]);
                }
                if low[v] == index[v] {
                    let mut component = Vec::new();
                    loop {
                        let w = stack.pop().expect("tarjan stack underflow");
                        on_stack[w] = false;
                        component.push(w);
                        if w == v {
                            break;
                        }
                    }
                    components.push(component);
                }
            }
        }
    }
    components
}

/// Inverse-CDF draw from a probability row.
pub fn sample_row<R: Rng + ?Sized>(row: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in row.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
        }
        cum += p;
        if u < cum {
            return i;
        }
    }
    last_positive
}

/// Next noise state drawn from `Π(x, y, s)`.
pub fn sample_next<R: Rng + ?Sized>(
    kernel: &FiniteKernel,
    x: &Point,
    y: &Point,
    s: usize,
    rng: &mut R,
) -> Result<usize> {
    let row = kernel.row(x, y, s)?;
    Ok(sample_row(&row, rng))
}

/// One atom `(x, s, weight)` of a product measure on `R^d1 × S`.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub x: Point,
    pub s: usize,
    pub weight: f64,
}

/// A finitely supported probability measure on `R^d1 × S` meant to belong to `D(y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SlowMeasure {
    pub atoms: Vec<Atom>,
}

impl SlowMeasure {
    /// `δ_x ⊗ ν`.
    pub fn product(x: &Point, nu: &[f64]) -> Self {
        SlowMeasure {
            atoms: nu
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(s, &w)| Atom {
                    x: x.clone(),
                    s,
                    weight: w,
                })
                .collect(),
        }
    }

    pub fn s_marginal(&self, alphabet: usize) -> Vec<f64> {
        let mut m = vec![0.0; alphabet];
        for a in &self.atoms {
            m[a.s] += a.weight;
        }
        m
    }

    /// `θ·self + (1 − θ)·other`.
    pub fn mix(&self, other: &SlowMeasure, theta: f64) -> Result<SlowMeasure> {
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::OutOfRange {
                value: theta,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let mut atoms: Vec<Atom> = self
            .atoms
            .iter()
            .map(|a| Atom {
                weight: a.weight * theta,
                ..a.clone()
            })
            .collect();
        atoms.extend(other.atoms.iter().map(|a| Atom {
            weight: a.weight * (1.0 - theta),
            ..a.clone()
        }));
        atoms.retain(|a| a.weight > 0.0);
        Ok(SlowMeasure { atoms })
    }

    /// Support containment in `λ(y)` (within `tol`) and one-step stationarity
    /// of the `s`-marginal under `Π(x, y, ·)`, within `1e-8`.
    pub fn check(&self, y: &Point, lambda_points: &[Point], kernel: &FiniteKernel, tol: f64) -> Result<MeasureCheck> {
        let n = kernel.alphabet_size();
        let total: f64 = self.atoms.iter().map(|a| a.weight).sum();
        let normalized = self.atoms.iter().all(|a| a.weight >= 0.0) && (total - 1.0).abs() <= 1e-12;
        let mut support_gap: f64 = 0.0;
        for a in &self.atoms {
            let d = lambda_points
                .iter()
                .map(|l| (l - &a.x).norm())
                .fold(f64::INFINITY, f64::min);
            support_gap = support_gap.max(d);
        }
        let marginal = self.s_marginal(n);
        let mut image = vec![0.0; n];
        for a in &self.atoms {
            for (j, p) in kernel.row(&a.x, y, a.s)?.into_iter().enumerate() {
                image[j] += a.weight * p;
            }
        }
        let stationarity_gap = image
            .iter()
            .zip(&marginal)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        Ok(MeasureCheck {
            normalized,
            support_gap,
            stationarity_gap,
            passed: normalized && support_gap <= tol && stationarity_gap <= 1e-8,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasureCheck {
    pub normalized: bool,
    pub support_gap: f64,
    pub stationarity_gap: f64,
    pub passed: bool,
}

/// Generating subfamily `{δ_x ⊗ ν : x ∈ λ(y), ν vertex of D²(x, y)}` of `D(y)`.
pub fn slow_measure_family(y: &Point, lambda_points: &[Point], kernel: &FiniteKernel) -> Result<Vec<SlowMeasure>> {
    if lambda_points.is_empty() {
        return Err(Error::InvalidInput("λ(y) sample is empty".into()));
    }
    let mut family = Vec::new();
    for x in lambda_points {
        let p = kernel.matrix_at(x, y)?;
        for nu in stationary_set(&p)?.vertices {
            family.push(SlowMeasure::product(x, &nu));
        }
    }
    Ok(family)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn mat(rows: &[&[f64]]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    fn origin() -> Point {
        Point::zeros(1)
    }

    #[test]
    fn identity_kernel_has_whole_simplex() {
        let set = stationary_set(&DMatrix::identity(2, 2)).unwrap();
        assert_eq!(set.vertices, vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    }

    /// Oracle: solve μP = μ by hand. With P = [[1/2, 1/2], [1/4, 3/4]] the
    /// balance equation μ₀/2 = μ₁/4 gives μ₁ = 2μ₀, so μ = (1/3, 2/3).
    #[test]
    fn two_state_irreducible() {
        let p = mat(&[&[0.5, 0.5], &[0.25, 0.75]]);
        let set = stationary_set(&p).unwrap();
        assert!(set.is_unique());
        let mu = set.unique().unwrap();
        assert!((mu[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((mu[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(stationarity_residual(&p, mu) <= 1e-10);
    }

    #[test]
    fn block_diagonal_gives_diracs() {
        let p = mat(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.5, 0.25, 0.25]]);
        let set = stationary_set(&p).unwrap();
        assert_eq!(set.vertices, vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
    }

    #[test]
    fn transient_states_get_no_mass() {
        let p = mat(&[
            &[0.2, 0.8, 0.0, 0.0],
            &[0.0, 0.0, 0.5, 0.5],
            &[0.0, 0.0, 0.1, 0.9],
            &[0.0, 0.0, 0.6, 0.4],
        ]);
        let set = stationary_set(&p).unwrap();
        let mu = set.unique().unwrap();
        assert_eq!(mu[0], 0.0);
        assert_eq!(mu[1], 0.0);
        assert!((mu[2] - 0.4).abs() < 1e-12);
        assert!((mu[3] - 0.6).abs() < 1e-12);
    }

    #[test]
    fn non_stochastic_row_is_named() {
        let p = mat(&[&[0.5, 0.5], &[0.3, 0.3]]);
        match stationary_set(&p) {
            Err(Error::NotStochastic { row, .. }) => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
        assert!(FiniteKernel::constant(vec![vec![1.0, 0.0], vec![0.5]]).is_err());
    }

    #[test]
    fn sampling_examples() {
        let k = FiniteKernel::constant(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            assert_eq!(sample_next(&k, &origin(), &origin(), 0, &mut rng).unwrap(), 0);
            assert_eq!(sample_next(&k, &origin(), &origin(), 1, &mut rng).unwrap(), 1);
        }
        assert!(matches!(
            sample_next(&k, &origin(), &origin(), 2, &mut rng),
            Err(Error::InvalidIndex { .. })
        ));
    }

    /// Binomial 3σ band: 0.5 ± 3·sqrt(0.25/1e5) ≈ 0.5 ± 0.00474 ⊂ [0.494, 0.506].
    #[test]
    fn fair_row_frequency() {
        let k = FiniteKernel::constant(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let zeros = (0..n)
            .filter(|_| sample_next(&k, &origin(), &origin(), 0, &mut rng).unwrap() == 0)
            .count();
        let freq = zeros as f64 / n as f64;
        assert!((0.494..=0.506).contains(&freq), "{freq}");
    }

    #[test]
    fn sampling_is_reproducible() {
        let k = FiniteKernel::constant(vec![vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut s = 0;
            (0..50)
                .map(|_| {
                    s = sample_next(&k, &origin(), &origin(), s, &mut rng).unwrap();
                    s
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(draw(3), draw(3));
    }

    #[test]
    fn slow_family_examples() {
        let y = origin();
        let irreducible = FiniteKernel::constant(vec![vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap();
        let x_star = Point::from_element(1, 2.0);
        let fam = slow_measure_family(&y, std::slice::from_ref(&x_star), &irreducible).unwrap();
        assert_eq!(fam.len(), 1);
        assert!((fam[0].s_marginal(2)[1] - 2.0 / 3.0).abs() < 1e-15);

        let identity = FiniteKernel::constant(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let fam = slow_measure_family(&y, std::slice::from_ref(&x_star), &identity).unwrap();
        assert_eq!(fam.len(), 2);
        assert_eq!(fam[0].atoms.len(), 1);
        assert_eq!(fam[0].atoms[0].s, 0);
        assert_eq!(fam[1].atoms[0].s, 1);

        let pts = [x_star, Point::from_element(1, -1.0)];
        let fam = slow_measure_family(&y, &pts, &irreducible).unwrap();
        assert_eq!(fam.len(), 2);
        assert_eq!(fam[0].s_marginal(2), fam[1].s_marginal(2));
        for m in &fam {
            assert!(m.check(&y, &pts, &irreducible, 1e-12).unwrap().passed);
        }
        assert!(slow_measure_family(&y, &[], &irreducible).is_err());
    }

    #[test]
    fn iterate_dependent_family_members_pass_checks() {
        let k = FiniteKernel::logistic_stay(0.2, 0.9, 1.5).unwrap();
        let y = origin();
        let pts: Vec<Point> = [-2.0, 0.0, 1.0, 3.0].iter().map(|&v| Point::from_element(1, v)).collect();
        let fam = slow_measure_family(&y, &pts, &k).unwrap();
        assert_eq!(fam.len(), 4);
        for m in &fam {
            assert!(m.check(&y, &pts, &k, 1e-12).unwrap().passed);
        }
        let mixed = fam[0].mix(&fam[3], 0.3).unwrap();
        assert!(mixed.check(&y, &pts, &k, 1e-12).unwrap().passed);
    }

    fn arb_stochastic(n: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0..1.0f64, n), n).prop_map(move |rows| {
            rows.into_iter()
                .map(|r| {
                    // Sparsify so that reducible chains show up.
                    let r: Vec<f64> = r.into_iter().map(|v| if v < 0.4 { 0.0 } else { v }).collect();
                    let s: f64 = r.iter().sum();
                    if s == 0.0 {
                        vec![1.0 / n as f64; n]
                    } else {
                        r.iter().map(|v| v / s).collect()
                    }
                })
                .collect()
        })
    }

    fn to_matrix(rows: &[Vec<f64>]) -> DMatrix<f64> {
        DMatrix::from_fn(rows.len(), rows.len(), |i, j| rows[i][j])
    }

    proptest! {
        #[test]
        fn vertices_are_stationary(rows in arb_stochastic(5)) {
            let p = to_matrix(&rows);
            let set = stationary_set(&p).unwrap();
            prop_assert!(!set.vertices.is_empty());
            for v in &set.vertices {
                prop_assert!(stationarity_residual(&p, v) <= 1e-10);
                prop_assert!((v.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }

        #[test]
        fn permutation_relabels_vertices(rows in arb_stochastic(4), perm in Just(vec![2usize, 0, 3, 1])) {
            let p = to_matrix(&rows);
            let q = DMatrix::from_fn(4, 4, |i, j| p[(perm[i], perm[j])]);
            let a = stationary_set(&p).unwrap();
            let b = stationary_set(&q).unwrap();
            prop_assert_eq!(a.vertices.len(), b.vertices.len());
            for vb in &b.vertices {
                let relabeled: Vec<f64> = (0..4).map(|k| {
                    let i = perm.iter().position(|&x| x == k).unwrap();
                    vb[i]
                }).collect();
                prop_assert!(a.vertices.iter().any(|va| va.iter().zip(&relabeled).all(|(x, y)| (x - y).abs() < 1e-9)));
            }
        }
    }
}
