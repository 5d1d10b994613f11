//! Averaged drifts.
//!
//! Over a finite alphabet the Aumann integral of `s ↦ F(s)` against `μ` is the
//! weighted Minkowski sum `Σ μ(s)·F(s)`. The fast mean field at `(x, y)` is the
//! union of these integrals over the stationary polytope of the frozen fast
//! kernel; since `μ ↦ Σ μ(s)F(s)` is affine in `μ`, the convex hull of that
//! union is attained on the polytope's vertices. The slow mean field does the
//! same over the generating family of `D(y)`.

use std::fmt;
use std::sync::Arc;

use crate::convex_geometry::{direction_net, hull_of_union, minkowski_combine, support, ConvexSet, Point};
use crate::error::{check_dim, Error, Result};
use crate::markov::{slow_measure_family, stationary_set, FiniteKernel, SlowMeasure};
use crate::set_valued_maps::{approximant, ApproxLevel, SetValuedMap};

pub type FieldOracle = dyn Fn(&Point) -> Result<ConvexSet> + Send + Sync;
pub type LambdaOracle = dyn Fn(&Point) -> Result<Vec<Point>> + Send + Sync;

#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    /// `x ↦ Ĥ₁(x, y)` with `y` frozen; growth measured as `K(1 + ‖x‖ + ‖y‖)`.
    Fast { y: Point },
    /// `y ↦ Ĥ₂(y)`; growth measured as `K(1 + ‖y‖)`.
    Slow,
    /// Any other autonomous field; growth `K(1 + ‖z‖)`.
    General,
}

/// An autonomous set-valued vector field `z ↦ M(z)`.
#[derive(Clone)]
pub struct MeanField {
    dim: usize,
    kind: FieldKind,
    growth_k: f64,
    eval: Arc<FieldOracle>,
}

impl fmt::Debug for MeanField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MeanField")
            .field("dim", &self.dim)
            .field("kind", &self.kind)
            .field("growth_k", &self.growth_k)
            .finish_non_exhaustive()
    }
}

impl MeanField {
    pub fn new<F>(dim: usize, kind: FieldKind, growth_k: f64, eval: F) -> Self
    where
        F: Fn(&Point) -> Result<ConvexSet> + Send + Sync + 'static,
    {
        MeanField {
            dim,
            kind,
            growth_k,
            eval: Arc::new(eval),
        }
    }

    /// Single-valued field `z ↦ {f(z)}`.
    pub fn single_valued<F>(dim: usize, kind: FieldKind, growth_k: f64, f: F) -> Self
    where
        F: Fn(&Point) -> Result<Point> + Send + Sync + 'static,
    {
        Self::new(dim, kind, growth_k, move |z| ConvexSet::singleton(f(z)?))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &FieldKind {
        &self.kind
    }

    pub fn growth_k(&self) -> f64 {
        self.growth_k
    }

    pub fn growth_bound(&self, z: &Point) -> f64 {
        match &self.kind {
            FieldKind::Fast { y } => self.growth_k * (1.0 + z.norm() + y.norm()),
            FieldKind::Slow | FieldKind::General => self.growth_k * (1.0 + z.norm()),
        }
    }

    pub fn evaluate(&self, z: &Point) -> Result<ConvexSet> {
        check_dim(self.dim, z.len())?;
        (self.eval)(z)
    }
}

fn check_probability(mu: &[f64]) -> Result<()> {
    if mu.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::NotStochastic {
            row: 0,
            reason: "negative or non-finite weight".into(),
        });
    }
    let total: f64 = mu.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::NotStochastic {
            row: 0,
            reason: format!("weights sum to {total}"),
        });
    }
    Ok(())
}

/// `∫ F dμ = Σ μ(s)·F(s)` over a finite alphabet.
pub fn aumann(slices: &[ConvexSet], mu: &[f64]) -> Result<ConvexSet> {
    if slices.len() != mu.len() {
        return Err(Error::LengthMismatch {
            left: mu.len(),
            right: slices.len(),
        });
    }
    check_probability(mu)?;
    minkowski_combine(mu, slices)
}

fn slices(map: &SetValuedMap, x: &Point, y: &Point) -> Result<Vec<ConvexSet>> {
    (0..map.alphabet_size()).map(|s| map.evaluate(x, y, s)).collect()
}

/// `Ĥ₁(x, y)`: hull of the Aumann integrals of `H₁(x, y, ·)` over the vertices
/// of the stationary polytope of `Π¹(x, y, ·)`.
pub fn h1_hat(h1: &SetValuedMap, k1: &FiniteKernel, x: &Point, y: &Point) -> Result<ConvexSet> {
    if h1.alphabet_size() != k1.alphabet_size() {
        return Err(Error::LengthMismatch {
            left: k1.alphabet_size(),
            right: h1.alphabet_size(),
        });
    }
    let parts = slices(h1, x, y)?;
    let stationary = stationary_set(&k1.matrix_at(x, y)?)?;
    let integrals = stationary
        .vertices
        .iter()
        .map(|mu| aumann(&parts, mu))
        .collect::<Result<Vec<_>>>()?;
    hull_of_union(&integrals)
}

/// `Ĥ₂(y)` over a family of measures: hull of `Σ wᵢ·H₂(xᵢ, y, sᵢ)` over the family.
pub fn h2_hat(h2: &SetValuedMap, family: &[SlowMeasure], y: &Point) -> Result<ConvexSet> {
    if family.is_empty() {
        return Err(Error::InvalidInput("empty measure family".into()));
    }
    let mut integrals = Vec::with_capacity(family.len());
    for measure in family {
        let weights: Vec<f64> = measure.atoms.iter().map(|a| a.weight).collect();
        check_probability(&weights)?;
        let sets = measure
            .atoms
            .iter()
            .map(|a| h2.evaluate(&a.x, y, a.s))
            .collect::<Result<Vec<_>>>()?;
        integrals.push(minkowski_combine(&weights, &sets)?);
    }
    hull_of_union(&integrals)
}

/// `x ↦ Ĥ₁(x, y)` for a frozen `y`.
pub fn fast_field(h1: &SetValuedMap, k1: &FiniteKernel, y: &Point) -> MeanField {
    let h1c = h1.clone();
    let k1c = k1.clone();
    let yc = y.clone();
    MeanField::new(
        h1.dims().d1,
        FieldKind::Fast { y: y.clone() },
        h1.growth_k(),
        move |x| h1_hat(&h1c, &k1c, x, &yc),
    )
}

/// `y ↦ Ĥ₂(y)` with `D(y)` generated from the points returned by `lambda`.
///
/// `lambda_growth` is a constant `K_λ` with `sup_{x ∈ λ(y)} ‖x‖ ≤ K_λ(1 + ‖y‖)`;
/// the field then grows at most like `K(1 + K_λ)(1 + ‖y‖)`.
pub fn slow_field(
    h2: &SetValuedMap,
    k2: &FiniteKernel,
    lambda: Arc<LambdaOracle>,
    lambda_growth: f64,
) -> MeanField {
    let h2c = h2.clone();
    let k2c = k2.clone();
    MeanField::new(
        h2.dims().d2,
        FieldKind::Slow,
        h2.growth_k() * (1.0 + lambda_growth),
        move |y| {
            let points = lambda(y)?;
            let family = slow_measure_family(y, &points, &k2c)?;
            h2_hat(&h2c, &family, y)
        },
    )
}

/// `Ĥ₁^(l)(·, y)`: the fast pipeline with `H₁` replaced by its level-`l` approximant.
pub fn approx_fast_field(h1: &SetValuedMap, k1: &FiniteKernel, y: &Point, l: u32) -> Result<MeanField> {
    let level = ApproxLevel::new(l, h1.growth_k())?;
    Ok(fast_field(&approximant(h1, level)?, k1, y))
}

/// `Ĥ₂^(l)`: the slow pipeline with `H₂` replaced by its level-`l` approximant.
pub fn approx_slow_field(
    h2: &SetValuedMap,
    k2: &FiniteKernel,
    lambda: Arc<LambdaOracle>,
    lambda_growth: f64,
    l: u32,
) -> Result<MeanField> {
    let level = ApproxLevel::new(l, h2.growth_k())?;
    Ok(slow_field(&approximant(h2, level)?, k2, lambda, lambda_growth))
}

/// Convergent sequence `(zₙ, vₙ) → (z, v)` with `vₙ ∈ M(zₙ)`.
#[derive(Debug, Clone)]
pub struct FieldSequence {
    pub terms: Vec<(Point, Point)>,
    pub limit: (Point, Point),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarchaudReport {
    pub convex_compact: bool,
    pub growth_ok: bool,
    pub closed_graph_ok: bool,
    /// Largest ratio `sup‖v‖ / bound` seen on the grid.
    pub worst_growth_ratio: f64,
    pub closed_graph_worst: f64,
    pub invalid_sequences: Vec<usize>,
}

impl MarchaudReport {
    pub fn passed(&self) -> bool {
        self.convex_compact && self.growth_ok && self.closed_graph_ok
    }
}

/// Sampled Marchaud check: convex compact values, linear growth on `grid`,
/// closed graph along `sequences`.
pub fn check_marchaud(
    field: &MeanField,
    grid: &[Point],
    sequences: &[FieldSequence],
    tol: f64,
) -> Result<MarchaudReport> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("probe grid is empty".into()));
    }
    let mut worst_ratio: f64 = 0.0;
    for z in grid {
        let value = field.evaluate(z)?;
        worst_ratio = worst_ratio.max(value.max_norm() / field.growth_bound(z));
    }
    let mut worst: f64 = 0.0;
    let mut invalid = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        let mut valid = true;
        for (z, v) in &seq.terms {
            if !field.evaluate(z)?.contains(v, tol)? {
                valid = false;
                break;
            }
        }
        if !valid {
            invalid.push(i);
            continue;
        }
        worst = worst.max(field.evaluate(&seq.limit.0)?.distance(&seq.limit.1)?);
    }
    Ok(MarchaudReport {
        convex_compact: true,
        growth_ok: worst_ratio <= 1.0 + 1e-12,
        closed_graph_ok: worst <= tol,
        worst_growth_ratio: worst_ratio,
        closed_graph_worst: worst,
        invalid_sequences: invalid,
    })
}

/// `max_d (min_l h_{Kₗ}(d) − h_base(d))` over the direction net: the
/// support-function distance from `⋂ₗ Kₗ` down to `base ⊆ ⋂ₗ Kₗ`.
pub fn support_minimum_gap(outer: &[ConvexSet], base: &ConvexSet) -> Result<f64> {
    if outer.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut gap: f64 = 0.0;
    for d in direction_net(base.dim()) {
        let mut m = f64::INFINITY;
        for k in outer {
            m = m.min(support(k, &d)?);
        }
        gap = gap.max(m - support(base, &d)?);
    }
    Ok(gap)
}
