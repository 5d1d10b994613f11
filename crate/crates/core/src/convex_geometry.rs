//! Convex compact sets stored as finite generating point clouds.
//!
//! A [`ConvexSet`] is the convex hull of its generators (V-representation).
//! Weighted Minkowski sums are closed-form in this representation, which is
//! what the averaging steps elsewhere in the crate need. Hull reduction is
//! exact in dimensions 1 and 2 and tolerance-based above.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, Error, Result};

pub type Point = DVector<f64>;

/// Number of directions in the net used for support-function sweeps in dim ≥ 2.
pub const DIRECTION_NET_SIZE: usize = 256;
const DIRECTION_NET_SEED: u64 = 0x5eed_d1e5;

/// Stopping tolerance of the projection QP.
pub const PROJECTION_TOL: f64 = 1e-10;

/// Tolerance used when filtering generators that lie inside the hull of the others.
const HULL_TOL: f64 = 1e-12;

/// A nonempty convex compact subset of `R^dim`, the convex hull of `points`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexSet {
    dim: usize,
    points: Vec<Point>,
}

impl ConvexSet {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        let first = points.first().ok_or(Error::EmptySet)?;
        let dim = first.len();
        if dim == 0 {
            return Err(Error::InvalidInput("convex set dimension must be ≥ 1".into()));
        }
        for p in &points {
            check_dim(dim, p.len())?;
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("convex set generator"));
            }
        }
        Ok(ConvexSet { dim, points })
    }

    pub fn singleton(p: Point) -> Result<Self> {
        Self::new(vec![p])
    }

    /// Closed interval `[lo, hi]` in `R^1`; a degenerate interval is stored as a singleton.
    pub fn interval(lo: f64, hi: f64) -> Result<Self> {
        if lo > hi {
            return Err(Error::InvalidInput(format!("interval [{lo}, {hi}] is empty")));
        }
        if lo == hi {
            return Self::singleton(Point::from_element(1, lo));
        }
        Self::new(vec![Point::from_element(1, lo), Point::from_element(1, hi)])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        Self::new(rows.iter().map(|r| Point::from_row_slice(r)).collect())
    }

    /// Axis-aligned box `center ± half_widths`.
    pub fn cuboid(center: &Point, half_widths: &[f64]) -> Result<Self> {
        check_dim(center.len(), half_widths.len())?;
        let mut points = vec![center.clone()];
        for (i, &h) in half_widths.iter().enumerate() {
            if h < 0.0 {
                return Err(Error::InvalidInput(format!("negative half width {h}")));
            }
            if h == 0.0 {
                continue;
            }
            let mut next = Vec::with_capacity(points.len() * 2);
            for p in &points {
                let mut lo = p.clone();
                lo[i] -= h;
                let mut hi = p.clone();
                hi[i] += h;
                next.push(lo);
                next.push(hi);
            }
            points = next;
        }
        Self::new(points)
    }

    /// Closed segment between two points.
    pub fn segment(a: Point, b: Point) -> Result<Self> {
        if a == b {
            return Self::singleton(a);
        }
        Self::new(vec![a, b])
    }

    /// The ball `center + radius·B` where `B` is the unit ball sampled on the
    /// direction net (exact in dim 1).
    pub fn ball(center: &Point, radius: f64) -> Result<Self> {
        if radius < 0.0 || !radius.is_finite() {
            return Err(Error::InvalidInput(format!("invalid ball radius {radius}")));
        }
        if radius == 0.0 {
            return Self::singleton(center.clone());
        }
        let points = direction_net(center.len())
            .into_iter()
            .map(|d| center + d * radius)
            .collect();
        Self::new(points)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_singleton(&self) -> bool {
        self.points.len() == 1
    }

    pub fn centroid(&self) -> Point {
        let mut c = Point::zeros(self.dim);
        for p in &self.points {
            c += p;
        }
        c / self.points.len() as f64
    }

    /// Largest generator norm.
    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(|p| p.norm()).fold(0.0, f64::max)
    }

    pub fn support(&self, d: &Point) -> Result<f64> {
        support(self, d)
    }

    pub fn translate(&self, v: &Point) -> Result<Self> {
        check_dim(self.dim, v.len())?;
        Ok(ConvexSet {
            dim: self.dim,
            points: self.points.iter().map(|p| p + v).collect(),
        })
    }

    /// `factor · self`; a zero factor collapses to the origin.
    pub fn scale(&self, factor: f64) -> Self {
        if factor == 0.0 {
            return ConvexSet {
                dim: self.dim,
                points: vec![Point::zeros(self.dim)],
            };
        }
        ConvexSet {
            dim: self.dim,
            points: self.points.iter().map(|p| p * factor).collect(),
        }
    }

    /// Image under a linear map `x ↦ A x`.
    pub fn linear_image(&self, a: &DMatrix<f64>) -> Result<Self> {
        check_dim(self.dim, a.ncols())?;
        Self::new(self.points.iter().map(|p| a * p).collect())
    }

    pub fn distance(&self, p: &Point) -> Result<f64> {
        Ok((project(self, p)? - p).norm())
    }

    pub fn contains(&self, p: &Point, tol: f64) -> Result<bool> {
        Ok(self.distance(p)? <= tol)
    }

    /// Euclidean projection of `p` onto the set.
    pub fn project(&self, p: &Point) -> Result<Point> {
        project(self, p)
    }

    /// Element of least Euclidean norm.
    pub fn least_norm(&self) -> Result<Point> {
        project(self, &Point::zeros(self.dim))
    }

    /// Same set with redundant generators removed.
    pub fn reduced(&self) -> Self {
        let points = match self.dim {
            1 => reduce_1d(&self.points),
            2 => reduce_2d(&self.points),
            _ => reduce_nd(&self.points),
        };
        ConvexSet { dim: self.dim, points }
    }

    /// True when every generator of `inner` lies in `self` up to `tol`,
    /// checked on the support functions over the direction net.
    pub fn contains_set(&self, inner: &ConvexSet, tol: f64) -> Result<bool> {
        Ok(support_slack(inner, self)? >= -tol)
    }
}

/// `max_{p ∈ K} ⟨p, d⟩`.
pub fn support(k: &ConvexSet, d: &Point) -> Result<f64> {
    check_dim(k.dim, d.len())?;
    let mut best = f64::NEG_INFINITY;
    for p in &k.points {
        best = best.max(p.dot(d));
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::EmptySet);
    }
    Ok(best)
}

/// Minimum over the direction net of `support(outer, d) − support(inner, d)`.
/// Nonnegative (up to tolerance) when `inner ⊆ outer`.
pub fn support_slack(inner: &ConvexSet, outer: &ConvexSet) -> Result<f64> {
    check_dim(outer.dim, inner.dim)?;
    let mut slack = f64::INFINITY;
    for d in direction_net(inner.dim) {
        slack = slack.min(support(outer, &d)? - support(inner, &d)?);
    }
    Ok(slack)
}

/// Unit directions used for support-function sweeps.
///
/// `{-1, +1}` in dim 1, 256 evenly spaced angles in dim 2, and in higher
/// dimensions the signed coordinate axes plus seeded Gaussian directions up
/// to 256 in total.
pub fn direction_net(dim: usize) -> Vec<Point> {
    match dim {
        0 => Vec::new(),
        1 => vec![Point::from_element(1, 1.0), Point::from_element(1, -1.0)],
        2 => (0..DIRECTION_NET_SIZE)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / DIRECTION_NET_SIZE as f64;
                Point::from_vec(vec![a.cos(), a.sin()])
            })
            .collect(),
        _ => {
            let mut net = Vec::with_capacity(DIRECTION_NET_SIZE.max(2 * dim));
            for i in 0..dim {
                for sign in [1.0, -1.0] {
                    let mut e = Point::zeros(dim);
                    e[i] = sign;
                    net.push(e);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(DIRECTION_NET_SEED ^ dim as u64);
            while net.len() < DIRECTION_NET_SIZE {
                let v = Point::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
                let n = v.norm();
                if n > 1e-12 {
                    net.push(v / n);
                }
            }
            net
        }
    }
}

/// Weighted Minkowski sum `Σ wᵢ·Kᵢ`, hull-reduced.
pub fn minkowski_combine(weights: &[f64], sets: &[ConvexSet]) -> Result<ConvexSet> {
    if weights.len() != sets.len() {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: sets.len(),
        });
    }
    let first = sets.first().ok_or(Error::EmptySet)?;
    let dim = first.dim;
    for (i, (&w, k)) in weights.iter().zip(sets).enumerate() {
        check_dim(dim, k.dim)?;
        if w < 0.0 || w.is_nan() {
            return Err(Error::NegativeWeight { index: i, weight: w });
        }
    }
    if dim == 1 {
        let (mut lo, mut hi) = (0.0, 0.0);
        for (&w, k) in weights.iter().zip(sets) {
            if w == 0.0 {
                continue;
            }
            let (a, b) = interval_bounds(k);
            lo += w * a;
            hi += w * b;
        }
        return ConvexSet::interval(lo, hi.max(lo));
    }
    let mut acc = ConvexSet {
        dim,
        points: vec![Point::zeros(dim)],
    };
    for (&w, k) in weights.iter().zip(sets) {
        if w == 0.0 {
            continue;
        }
        acc = minkowski_sum(&acc, &k.scale(w))?;
    }
    Ok(acc)
}

/// Minkowski sum `A ⊕ B`.
pub fn minkowski_sum(a: &ConvexSet, b: &ConvexSet) -> Result<ConvexSet> {
    check_dim(a.dim, b.dim)?;
    if b.is_singleton() {
        return a.translate(&b.points[0]);
    }
    if a.is_singleton() {
        return b.translate(&a.points[0]);
    }
    let a = a.reduced();
    let b = b.reduced();
    let mut points = Vec::with_capacity(a.len() * b.len());
    for p in &a.points {
        for q in &b.points {
            points.push(p + q);
        }
    }
    let estimate = a.len() + b.len();
    let sum = ConvexSet { dim: a.dim, points };
    if a.dim <= 2 || sum.len() > 4 * estimate {
        Ok(sum.reduced())
    } else {
        Ok(sum)
    }
}

/// Convex hull of a union of sets.
pub fn hull_of_union(sets: &[ConvexSet]) -> Result<ConvexSet> {
    let first = sets.first().ok_or(Error::EmptySet)?;
    let mut points = Vec::new();
    for k in sets {
        check_dim(first.dim, k.dim)?;
        points.extend(k.points.iter().cloned());
    }
    Ok(ConvexSet {
        dim: first.dim,
        points,
    }
    .reduced())
}

/// Symmetric Hausdorff distance.
///
/// Exact for intervals. In dim ≥ 2 it is the larger of the support-function
/// discrepancy over the direction net and the largest generator-to-set
/// distance; for polytopes the latter is exact up to the projection tolerance.
pub fn hausdorff(k1: &ConvexSet, k2: &ConvexSet) -> Result<f64> {
    check_dim(k1.dim, k2.dim)?;
    if k1.dim == 1 {
        let (a1, b1) = interval_bounds(k1);
        let (a2, b2) = interval_bounds(k2);
        return Ok((a1 - a2).abs().max((b1 - b2).abs()));
    }
    let mut best: f64 = 0.0;
    for d in direction_net(k1.dim) {
        best = best.max((support(k1, &d)? - support(k2, &d)?).abs());
    }
    let r1 = k1.reduced();
    let r2 = k2.reduced();
    for p in &r1.points {
        best = best.max(r2.distance(p)?);
    }
    for p in &r2.points {
        best = best.max(r1.distance(p)?);
    }
    Ok(best)
}

/// Euclidean projection onto the hull, via Wolfe's minimum-norm-point
/// active-set method on the translated generators.
pub fn project(k: &ConvexSet, p: &Point) -> Result<Point> {
    check_dim(k.dim, p.len())?;
    if k.is_singleton() {
        return Ok(k.points[0].clone());
    }
    if k.dim == 1 {
        let (lo, hi) = interval_bounds(k);
        return Ok(Point::from_element(1, p[0].clamp(lo, hi)));
    }
    let shifted: Vec<Point> = k.points.iter().map(|q| q - p).collect();
    let w = min_norm_point(&shifted)?;
    Ok(p + w)
}

fn interval_bounds(k: &ConvexSet) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in &k.points {
        lo = lo.min(p[0]);
        hi = hi.max(p[0]);
    }
    (lo, hi)
}

/// Minimum-norm point of `conv(q)` (Wolfe 1976).
fn min_norm_point(q: &[Point]) -> Result<Point> {
    let n = q.len();
    let max_sq = q.iter().map(|v| v.norm_squared()).fold(0.0, f64::max);
    if max_sq == 0.0 {
        return Ok(q[0].clone());
    }
    let max_iter = 10 * n.max(5);
    let start = (0..n)
        .min_by(|&i, &j| q[i].norm_squared().total_cmp(&q[j].norm_squared()))
        .unwrap_or(0);
    let mut active = vec![start];
    let mut lambda = vec![1.0];
    let mut x = q[start].clone();
    let mut iterations = 0;

    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(Error::NonConvergence {
                what: "projection",
                iterations: max_iter,
                residual: x.norm(),
            });
        }
        let (j, best) = (0..n)
            .map(|j| (j, x.dot(&q[j])))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        if x.norm_squared() - best <= PROJECTION_TOL * PROJECTION_TOL.sqrt() * max_sq
            || active.contains(&j)
        {
            return Ok(x);
        }
        active.push(j);
        lambda.push(0.0);

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::NonConvergence {
                    what: "projection",
                    iterations: max_iter,
                    residual: x.norm(),
                });
            }
            let alpha = match affine_minimizer(q, &active) {
                Some(a) => a,
                None => {
                    // Affinely dependent corral: drop the newest point and stop.
                    active.pop();
                    lambda.pop();
                    return Ok(combine(q, &active, &lambda));
                }
            };
            if alpha.iter().all(|&a| a > PROJECTION_TOL) {
                lambda = alpha;
                x = combine(q, &active, &lambda);
                break;
            }
            let mut theta = 1.0f64;
            for (l, a) in lambda.iter().zip(&alpha) {
                if *a <= PROJECTION_TOL {
                    let denom = l - a;
                    if denom > 0.0 {
                        theta = theta.min(l / denom);
                    }
                }
            }
            for (l, a) in lambda.iter_mut().zip(&alpha) {
                *l = theta * a + (1.0 - theta) * *l;
            }
            let mut k = 0;
            while k < active.len() {
                if lambda[k] <= PROJECTION_TOL {
                    active.remove(k);
                    lambda.remove(k);
                } else {
                    k += 1;
                }
            }
            let total: f64 = lambda.iter().sum();
            for l in &mut lambda {
                *l /= total;
            }
            x = combine(q, &active, &lambda);
        }
    }
}

fn combine(q: &[Point], active: &[usize], lambda: &[f64]) -> Point {
    let mut x = Point::zeros(q[0].len());
    for (&i, &l) in active.iter().zip(lambda) {
        x += &q[i] * l;
    }
    x
}

/// Weights minimizing `‖Σ αᵢ qᵢ‖` over the affine hull of the active points.
fn affine_minimizer(q: &[Point], active: &[usize]) -> Option<Vec<f64>> {
    let m = active.len();
    if m == 1 {
        return Some(vec![1.0]);
    }
    let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            a[(r, c)] = q[i].dot(&q[j]);
        }
        a[(r, m)] = 1.0;
        a[(m, r)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m + 1);
    rhs[m] = 1.0;
    let sol = a.lu().solve(&rhs)?;
    if sol.iter().any(|v| !v.is_finite()) {
        return None;
    }
    Some(sol.iter().take(m).copied().collect())
}

fn reduce_1d(points: &[Point]) -> Vec<Point> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for p in points {
        lo = lo.min(p[0]);
        hi = hi.max(p[0]);
    }
    if lo == hi {
        vec![Point::from_element(1, lo)]
    } else {
        vec![Point::from_element(1, lo), Point::from_element(1, hi)]
    }
}

/// Andrew's monotone chain; collinear boundary points are dropped.
fn reduce_2d(points: &[Point]) -> Vec<Point> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p[0], p[1])).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() <= 2 {
        return pts
            .into_iter()
            .map(|(x, y)| Point::from_vec(vec![x, y]))
            .collect();
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    };
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.is_empty() {
        hull.push(pts[0]);
    }
    hull.into_iter()
        .map(|(x, y)| Point::from_vec(vec![x, y]))
        .collect()
}

/// Drops duplicates and generators within `HULL_TOL` of the hull of the others.
fn reduce_nd(points: &[Point]) -> Vec<Point> {
    let scale = points.iter().map(|p| p.norm()).fold(1.0, f64::max);
    let mut kept: Vec<Point> = Vec::with_capacity(points.len());
    for p in points {
        if !kept.iter().any(|k| (k - p).norm() <= HULL_TOL * scale) {
            kept.push(p.clone());
        }
    }
    let mut i = 0;
    while i < kept.len() && kept.len() > 1 {
        let others: Vec<Point> = kept
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, v)| v - &kept[i])
            .collect();
        match min_norm_point(&others) {
            Ok(w) if w.norm() <= HULL_TOL * scale * 1e3 => {
                kept.remove(i);
            }
            _ => i += 1,
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pt(v: &[f64]) -> Point {
        Point::from_row_slice(v)
    }

    fn unit_square() -> ConvexSet {
        ConvexSet::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0]]).unwrap()
    }

    #[test]
    fn support_examples() {
        assert_eq!(support(&unit_square(), &pt(&[1.0, 1.0])).unwrap(), 2.0);
        let k = ConvexSet::singleton(pt(&[3.0])).unwrap();
        assert_eq!(support(&k, &pt(&[1.0])).unwrap(), 3.0);
        assert_eq!(support(&k, &pt(&[-1.0])).unwrap(), -3.0);
        let k = ConvexSet::interval(-1.0, 1.0).unwrap();
        assert_eq!(support(&k, &pt(&[-1.0])).unwrap(), 1.0);
    }

    #[test]
    fn support_dimension_mismatch() {
        let err = support(&unit_square(), &pt(&[1.0])).unwrap_err();
        assert_eq!(err, Error::DimensionMismatch { expected: 2, found: 1 });
    }

    #[test]
    fn empty_and_bad_generators_rejected() {
        assert_eq!(ConvexSet::new(vec![]).unwrap_err(), Error::EmptySet);
        assert!(ConvexSet::new(vec![pt(&[1.0, 2.0]), pt(&[1.0])]).is_err());
        assert!(ConvexSet::new(vec![pt(&[f64::NAN])]).is_err());
    }

    #[test]
    fn minkowski_examples() {
        let unit = ConvexSet::interval(0.0, 1.0).unwrap();
        let two = ConvexSet::singleton(pt(&[2.0])).unwrap();
        let k = minkowski_combine(&[1.0], std::slice::from_ref(&unit)).unwrap();
        assert_eq!(hausdorff(&k, &unit).unwrap(), 0.0);
        let k = minkowski_combine(&[0.5, 0.5], &[unit.clone(), two.clone()]).unwrap();
        assert!(hausdorff(&k, &ConvexSet::interval(1.0, 1.5).unwrap()).unwrap() < 1e-15);
        let k = minkowski_combine(&[1.0 / 3.0, 2.0 / 3.0], &[unit, two]).unwrap();
        assert!(hausdorff(&k, &ConvexSet::interval(4.0 / 3.0, 5.0 / 3.0).unwrap()).unwrap() < 1e-15);
    }

    #[test]
    fn minkowski_errors() {
        let unit = ConvexSet::interval(0.0, 1.0).unwrap();
        assert!(matches!(
            minkowski_combine(&[-0.1], std::slice::from_ref(&unit)),
            Err(Error::NegativeWeight { .. })
        ));
        assert!(matches!(
            minkowski_combine(&[1.0, 1.0], &[unit.clone(), unit_square()]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            minkowski_combine(&[1.0], &[unit.clone(), unit]),
            Err(Error::LengthMismatch { .. })
        ));
    }

    #[test]
    fn minkowski_2d_squares() {
        let sq = unit_square();
        let k = minkowski_combine(&[0.5, 0.5], &[sq.clone(), sq.clone()]).unwrap();
        assert!(hausdorff(&k, &sq).unwrap() < 1e-12);
        assert_eq!(k.len(), 4);
    }

    #[test]
    fn hausdorff_examples() {
        let a = ConvexSet::interval(0.0, 1.0).unwrap();
        let b = ConvexSet::interval(0.0, 2.0).unwrap();
        assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
        assert_eq!(hausdorff(&a, &b).unwrap(), 1.0);
        let sq = unit_square();
        let shifted = sq.translate(&pt(&[1.0, 0.0])).unwrap();
        assert!((hausdorff(&sq, &shifted).unwrap() - 1.0).abs() < 1e-9);
    }

    /// Brute-force Hausdorff over densely sampled boundaries.
    #[test]
    fn hausdorff_matches_boundary_sampling() {
        fn square_boundary(offset: f64, m: usize) -> Vec<(f64, f64)> {
            let mut out = Vec::new();
            for i in 0..=m {
                let t = i as f64 / m as f64;
                out.extend([(offset + t, 0.0), (offset + t, 1.0), (offset, t), (offset + 1.0, t)]);
            }
            out
        }
        fn dist_to_square(p: (f64, f64), offset: f64) -> f64 {
            let dx = (offset - p.0).max(p.0 - offset - 1.0).max(0.0);
            let dy = (-p.1).max(p.1 - 1.0).max(0.0);
            (dx * dx + dy * dy).sqrt()
        }
        let a = square_boundary(0.0, 400);
        let b = square_boundary(1.0, 400);
        let h1 = a.iter().map(|&p| dist_to_square(p, 1.0)).fold(0.0, f64::max);
        let h2 = b.iter().map(|&p| dist_to_square(p, 0.0)).fold(0.0, f64::max);
        let brute = h1.max(h2);
        let sq = unit_square();
        let shifted = sq.translate(&pt(&[1.0, 0.0])).unwrap();
        assert!((hausdorff(&sq, &shifted).unwrap() - brute).abs() < 1e-9);
    }

    #[test]
    fn project_examples() {
        let tri = ConvexSet::from_rows(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let p = project(&tri, &pt(&[2.0, 0.0])).unwrap();
        assert!((p - pt(&[1.0, 0.0])).norm() < 1e-12);
        let inside = pt(&[0.2, 0.3]);
        assert!((project(&tri, &inside).unwrap() - &inside).norm() < 1e-12);
        let k = ConvexSet::interval(-1.0, 1.0).unwrap();
        assert_eq!(project(&k, &pt(&[-3.0])).unwrap(), pt(&[-1.0]));
        let p = project(&tri, &pt(&[1.0, 1.0])).unwrap();
        assert!((p - pt(&[0.5, 0.5])).norm() < 1e-12);
    }

    #[test]
    fn project_in_three_dimensions() {
        let cube = ConvexSet::cuboid(&pt(&[0.0, 0.0, 0.0]), &[1.0, 1.0, 1.0]).unwrap();
        let p = project(&cube, &pt(&[3.0, 0.5, -4.0])).unwrap();
        assert!((p - pt(&[1.0, 0.5, -1.0])).norm() < 1e-9);
        assert_eq!(cube.reduced().len(), 8);
    }

    #[test]
    fn reduce_2d_drops_interior_and_collinear() {
        let k = ConvexSet::from_rows(&[
            &[0.0, 0.0],
            &[1.0, 0.0],
            &[0.5, 0.0],
            &[0.0, 1.0],
            &[1.0, 1.0],
            &[0.5, 0.5],
        ])
        .unwrap();
        assert_eq!(k.reduced().len(), 4);
    }

    #[test]
    fn ball_is_inscribed_polygon() {
        let b = ConvexSet::ball(&pt(&[0.0, 0.0]), 2.0).unwrap();
        assert_eq!(b.len(), DIRECTION_NET_SIZE);
        assert!((b.max_norm() - 2.0).abs() < 1e-12);
        let b1 = ConvexSet::ball(&pt(&[1.0]), 0.5).unwrap();
        assert_eq!(interval_bounds(&b1), (0.5, 1.5));
    }

    fn arb_set2() -> impl Strategy<Value = ConvexSet> {
        prop::collection::vec((-5.0..5.0f64, -5.0..5.0f64), 1..8).prop_map(|v| {
            ConvexSet::new(v.into_iter().map(|(a, b)| pt(&[a, b])).collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn support_is_sublinear(k in arb_set2(), a in (-3.0..3.0f64, -3.0..3.0f64), b in (-3.0..3.0f64, -3.0..3.0f64)) {
            let d1 = pt(&[a.0, a.1]);
            let d2 = pt(&[b.0, b.1]);
            let lhs = support(&k, &(&d1 + &d2)).unwrap();
            let rhs = support(&k, &d1).unwrap() + support(&k, &d2).unwrap();
            prop_assert!(lhs <= rhs + 1e-12);
        }

        #[test]
        fn minkowski_is_associative(k1 in arb_set2(), k2 in arb_set2(), k3 in arb_set2(),
                                    w in (0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64)) {
            let flat = minkowski_combine(&[w.0, w.1, w.2], &[k1.clone(), k2.clone(), k3.clone()]).unwrap();
            let inner = minkowski_combine(&[w.0, w.1], &[k1, k2]).unwrap();
            let nested = minkowski_combine(&[1.0, w.2], &[inner, k3]).unwrap();
            prop_assert!(hausdorff(&flat, &nested).unwrap() <= 1e-9);
        }

        #[test]
        fn projection_is_nonexpansive(k in arb_set2(), p in (-10.0..10.0f64, -10.0..10.0f64), q in (-10.0..10.0f64, -10.0..10.0f64)) {
            let p = pt(&[p.0, p.1]);
            let q = pt(&[q.0, q.1]);
            let pp = project(&k, &p).unwrap();
            let pq = project(&k, &q).unwrap();
            prop_assert!((&pp - &pq).norm() <= (&p - &q).norm() + 1e-9);
        }

        #[test]
        fn projection_variational_inequality(k in arb_set2(), p in (-10.0..10.0f64, -10.0..10.0f64)) {
            let p = pt(&[p.0, p.1]);
            let proj = project(&k, &p).unwrap();
            for g in k.points() {
                prop_assert!((&p - &proj).dot(&(g - &proj)) <= 1e-8);
            }
        }

        #[test]
        fn interval_hausdorff_is_endpoint_gap(a in -5.0..5.0f64, la in 0.0..3.0f64, b in -5.0..5.0f64, lb in 0.0..3.0f64) {
            let k1 = ConvexSet::interval(a, a + la).unwrap();
            let k2 = ConvexSet::interval(b, b + lb).unwrap();
            let expected = (a - b).abs().max(((a + la) - (b + lb)).abs());
            prop_assert_eq!(hausdorff(&k1, &k2).unwrap(), expected);
        }
    }
}
