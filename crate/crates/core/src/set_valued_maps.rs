//! Set-valued drift maps `(x, y, s) ↦ F(x, y, s) ⊆ R^k` with convex compact
//! values, closed graph and linear growth, together with their continuous
//! outer approximants `F^(l)` and single-valued parametrizations `f^(l)`.
//!
//! The approximant used here is
//!
//! ```text
//! F^(l)(x, y, s) = conv ⋃_{‖(x', y') − (x, y)‖ ≤ 3·2^-l} F(x', y', s)  ⊕  2^-l · B
//! ```
//!
//! with the union sampled on a fixed seeded net of `2^min(l+3, 8)` points of
//! the ball (always including the centre and the signed axis points) and `B`
//! the unit ball sampled on the direction net. The noise argument `s` is held
//! fixed: on a finite alphabet neighbourhoods in `s` are singletons.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::convex_geometry::{hausdorff, hull_of_union, minkowski_sum, ConvexSet, Point};
use crate::error::{check_dim, Error, Result};

const BALL_NET_SEED: u64 = 0xba11_0f5e;

/// Input/output dimensions of a drift map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapDims {
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
}

pub type MapOracle = dyn Fn(&Point, &Point, usize) -> Result<ConvexSet> + Send + Sync;

/// A set-valued map with declared linear growth constant.
#[derive(Clone)]
pub struct SetValuedMap {
    dims: MapDims,
    alphabet: usize,
    growth_k: f64,
    eval: Arc<MapOracle>,
}

impl fmt::Debug for SetValuedMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SetValuedMap")
            .field("dims", &self.dims)
            .field("alphabet", &self.alphabet)
            .field("growth_k", &self.growth_k)
            .finish_non_exhaustive()
    }
}

impl SetValuedMap {
    pub fn new<F>(dims: MapDims, alphabet: usize, growth_k: f64, eval: F) -> Result<Self>
    where
        F: Fn(&Point, &Point, usize) -> Result<ConvexSet> + Send + Sync + 'static,
    {
        if dims.k == 0 {
            return Err(Error::InvalidInput("output dimension must be ≥ 1".into()));
        }
        if alphabet == 0 {
            return Err(Error::InvalidInput("alphabet must be nonempty".into()));
        }
        if !(growth_k > 0.0 && growth_k.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "growth constant must be positive, got {growth_k}"
            )));
        }
        Ok(SetValuedMap {
            dims,
            alphabet,
            growth_k,
            eval: Arc::new(eval),
        })
    }

    /// Map whose values are single points.
    pub fn single_valued<F>(dims: MapDims, alphabet: usize, growth_k: f64, f: F) -> Result<Self>
    where
        F: Fn(&Point, &Point, usize) -> Point + Send + Sync + 'static,
    {
        Self::new(dims, alphabet, growth_k, move |x, y, s| {
            ConvexSet::singleton(f(x, y, s))
        })
    }

    pub fn dims(&self) -> MapDims {
        self.dims
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet
    }

    pub fn growth_k(&self) -> f64 {
        self.growth_k
    }

    /// `K·(1 + ‖x‖ + ‖y‖)`.
    pub fn growth_bound(&self, x: &Point, y: &Point) -> f64 {
        self.growth_k * (1.0 + x.norm() + y.norm())
    }

    pub fn evaluate(&self, x: &Point, y: &Point, s: usize) -> Result<ConvexSet> {
        check_dim(self.dims.d1, x.len())?;
        check_dim(self.dims.d2, y.len())?;
        if s >= self.alphabet {
            return Err(Error::InvalidIndex {
                index: s,
                size: self.alphabet,
            });
        }
        let out = (self.eval)(x, y, s)?;
        check_dim(self.dims.k, out.dim())?;
        Ok(out)
    }
}

/// A point `(x, y, s)` at which a map is probed.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub x: Point,
    pub y: Point,
    pub s: usize,
}

impl Probe {
    pub fn new(x: Point, y: Point, s: usize) -> Self {
        Probe { x, y, s }
    }
}

/// A convergent sequence `(xₙ, yₙ, sₙ, zₙ) → (x, y, s, z)` with `zₙ ∈ F(xₙ, yₙ, sₙ)`,
/// used as a closed-graph witness.
#[derive(Debug, Clone)]
pub struct ProbeSequence {
    pub terms: Vec<(Probe, Point)>,
    pub limit: (Probe, Point),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthViolation {
    pub probe: usize,
    pub sup_norm: f64,
    pub bound: f64,
}

/// Outcome of [`validate_sam`].
#[derive(Debug, Clone, PartialEq)]
pub struct SamReport {
    /// Always true: values are hulls of finite point clouds.
    pub convex_compact: bool,
    pub growth_ok: bool,
    pub closed_graph_ok: bool,
    pub growth_violations: Vec<GrowthViolation>,
    /// Largest `distance(z, F(x, y, s))` over the sequence limits.
    pub closed_graph_worst: f64,
    /// Sequences discarded because some `zₙ` was not in `F(xₙ, yₙ, sₙ)`.
    pub invalid_sequences: Vec<usize>,
}

impl SamReport {
    pub fn passed(&self) -> bool {
        self.convex_compact && self.growth_ok && self.closed_graph_ok
    }
}

/// Checks compact convex values, the growth bound at every probe, and the
/// closed-graph property along the supplied convergent sequences.
pub fn validate_sam(
    map: &SetValuedMap,
    grid: &[Probe],
    sequences: &[ProbeSequence],
    tol: f64,
) -> Result<SamReport> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("probe grid is empty".into()));
    }
    let mut growth_violations = Vec::new();
    for (i, p) in grid.iter().enumerate() {
        let value = map.evaluate(&p.x, &p.y, p.s)?;
        let sup = value.max_norm();
        let bound = map.growth_bound(&p.x, &p.y);
        if sup > bound * (1.0 + 1e-12) {
            growth_violations.push(GrowthViolation {
                probe: i,
                sup_norm: sup,
                bound,
            });
        }
    }
    let (worst, invalid) = closed_graph_witness(sequences, tol, |p| map.evaluate(&p.x, &p.y, p.s))?;
    Ok(SamReport {
        convex_compact: true,
        growth_ok: growth_violations.is_empty(),
        closed_graph_ok: worst <= tol,
        growth_violations,
        closed_graph_worst: worst,
        invalid_sequences: invalid,
    })
}

pub(crate) fn closed_graph_witness<F>(
    sequences: &[ProbeSequence],
    tol: f64,
    eval: F,
) -> Result<(f64, Vec<usize>)>
where
    F: Fn(&Probe) -> Result<ConvexSet>,
{
    let mut worst: f64 = 0.0;
    let mut invalid = Vec::new();
    for (i, seq) in sequences.iter().enumerate() {
        let mut valid = true;
        for (p, z) in &seq.terms {
            if !eval(p)?.contains(z, tol)? {
                valid = false;
                break;
            }
        }
        if !valid {
            invalid.push(i);
            continue;
        }
        let (p, z) = &seq.limit;
        worst = worst.max(eval(p)?.distance(z)?);
    }
    Ok((worst, invalid))
}

/// Level `l` of the outer approximation: radius `3·2^-l`, inflation `2^-l`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApproxLevel {
    pub l: u32,
    pub radius: f64,
    pub inflation: f64,
    pub growth_kl: f64,
}

impl ApproxLevel {
    /// `growth_k` is the growth constant of the map being approximated.
    pub fn new(l: u32, growth_k: f64) -> Result<Self> {
        if l == 0 {
            return Err(Error::InvalidInput("approximation level must be ≥ 1".into()));
        }
        let inflation = 0.5f64.powi(l as i32);
        let radius = 3.0 * inflation;
        // ‖x'‖ + ‖y'‖ ≤ ‖x‖ + ‖y‖ + √2·radius on the ball, and 1 + ‖x‖ + ‖y‖ ≥ 1.
        let growth_kl = growth_k * (1.0 + std::f64::consts::SQRT_2 * radius) + inflation;
        Ok(ApproxLevel {
            l,
            radius,
            inflation,
            growth_kl,
        })
    }

    /// Bound on `growth_kl` valid for every level.
    pub fn uniform_growth_bound(growth_k: f64) -> f64 {
        growth_k * (1.0 + 1.5 * std::f64::consts::SQRT_2) + 0.5
    }

    /// Number of net points used to sample the ball at this level.
    pub fn net_size(&self) -> usize {
        1 << (self.l + 3).min(8)
    }
}

/// Offsets of the ball net in `R^dim` (unit radius).
pub fn ball_net(dim: usize, level: &ApproxLevel) -> Vec<Point> {
    let mut net = vec![Point::zeros(dim)];
    for i in 0..dim {
        for sign in [1.0, -1.0] {
            let mut e = Point::zeros(dim);
            e[i] = sign;
            net.push(e);
        }
    }
    if dim == 0 {
        return net;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(BALL_NET_SEED ^ ((level.l as u64) << 32) ^ dim as u64);
    while net.len() < level.net_size() {
        let v = Point::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let n = v.norm();
        if n > 1e-12 {
            net.push(v / n);
        }
    }
    net
}

fn split(z: &Point, d1: usize) -> (Point, Point) {
    let x = Point::from_iterator(d1, z.iter().take(d1).copied());
    let y = Point::from_iterator(z.len() - d1, z.iter().skip(d1).copied());
    (x, y)
}

/// `F^(l)(x, y, s)`.
pub fn upper_approx(
    map: &SetValuedMap,
    level: &ApproxLevel,
    x: &Point,
    y: &Point,
    s: usize,
) -> Result<ConvexSet> {
    let dims = map.dims();
    check_dim(dims.d1, x.len())?;
    check_dim(dims.d2, y.len())?;
    let joint_dim = dims.d1 + dims.d2;
    let mut center = Point::zeros(joint_dim);
    center.rows_mut(0, dims.d1).copy_from(x);
    center.rows_mut(dims.d1, dims.d2).copy_from(y);
    let mut values = Vec::new();
    for offset in ball_net(joint_dim, level) {
        let (xp, yp) = split(&(&center + offset * level.radius), dims.d1);
        values.push(map.evaluate(&xp, &yp, s)?);
    }
    let union = hull_of_union(&values)?;
    let ball = ConvexSet::ball(&Point::zeros(dims.k), level.inflation)?;
    minkowski_sum(&union, &ball)
}

/// The map `F^(l)` as a [`SetValuedMap`] with growth constant `growth_kl`.
pub fn approximant(map: &SetValuedMap, level: ApproxLevel) -> Result<SetValuedMap> {
    let inner = map.clone();
    SetValuedMap::new(map.dims(), map.alphabet_size(), level.growth_kl, move |x, y, s| {
        upper_approx(&inner, &level, x, y, s)
    })
}

/// Covering radius used for parametrizations: `2·K_l·(1 + ‖x‖ + ‖y‖)`.
///
/// Every generator of `F^(l)(x, y, s)` has norm at most `K_l(1 + ‖x‖ + ‖y‖)`,
/// so the ball of this radius around the generator centroid covers the set.
pub fn param_radius(growth_kl: f64, x: &Point, y: &Point) -> f64 {
    2.0 * growth_kl * (1.0 + x.norm() + y.norm())
}

/// `f^(l)(x, y, s, u) = project(F^(l)(x, y, s), c + R·u)` with `c` the generator
/// centroid and `u` in the closed unit ball.
pub fn parametrize(set: &ConvexSet, u: &Point, radius: f64) -> Result<Point> {
    check_dim(set.dim(), u.len())?;
    let un = u.norm();
    if un > 1.0 + 1e-12 {
        return Err(Error::OutOfRange {
            value: un,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let c = set.centroid();
    let scale = 1.0 + set.max_norm();
    for p in set.points() {
        let gap = (p - &c).norm();
        if gap > radius + 1e-12 * scale {
            return Err(Error::InvalidInput(format!(
                "radius {radius} does not cover the set (generator at distance {gap})"
            )));
        }
    }
    set.project(&(c + u * radius))
}

/// Largest observed `hausdorff(F(x', y', s), F(x, y, s)) / ‖(x', y') − (x, y)‖`
/// over the level-`l` ball net around `(x, y)`.
pub fn local_variation(
    map: &SetValuedMap,
    level: &ApproxLevel,
    x: &Point,
    y: &Point,
    s: usize,
) -> Result<f64> {
    let dims = map.dims();
    let base = map.evaluate(x, y, s)?;
    let mut center = Point::zeros(dims.d1 + dims.d2);
    center.rows_mut(0, dims.d1).copy_from(x);
    center.rows_mut(dims.d1, dims.d2).copy_from(y);
    let mut lip: f64 = 0.0;
    for offset in ball_net(dims.d1 + dims.d2, level).into_iter().skip(1) {
        let step = offset * level.radius;
        let (xp, yp) = split(&(&center + &step), dims.d1);
        let h = hausdorff(&map.evaluate(&xp, &yp, s)?, &base)?;
        lip = lip.max(h / step.norm());
    }
    Ok(lip)
}
