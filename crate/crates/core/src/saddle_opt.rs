//! Markov-averaged equality-constrained convex programs solved by primal
//! descent on a fast timescale and dual ascent on a slow one.
//!
//! For data `J(x, s)`, `C(s)x = w(s)` and a kernel with stationary law `μ`,
//! the penalized objective is
//!
//! ```text
//! Ĵ(x, s) = J(x, s) + ε/(2r²)·‖x‖² + (K+1)/2·max(‖x‖² − r², 0)
//! ```
//!
//! and the recursion is `Y += b(C(S)X − w(S))`,
//! `X += a(−(∂Ĵ(X, S) + C(S)ᵀY) + M)` with one chain `S` feeding both.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::convex_geometry::{hull_of_union, minkowski_combine, ConvexSet, Point};
use crate::di_dynamics::{di_solve, DIPath, Selection};
use crate::error::{check_dim, Error, Result};
use crate::markov::{stationary_set, FiniteKernel};
use crate::mean_field::{FieldKind, MeanField};
use crate::set_valued_maps::{MapDims, SetValuedMap};
use crate::two_timescale::{run, ChainCoupling, InitialState, RunConfig, Trajectory, TwoTimescaleProblem};

pub type ObjectiveOracle = dyn Fn(&Point, usize) -> f64 + Send + Sync;
pub type SubgradOracle = dyn Fn(&Point, usize) -> Result<ConvexSet> + Send + Sync;

/// Number of rays used for the coercivity check.
pub const COERCIVITY_RAYS: usize = 64;
/// Stopping level for the minimum-norm subgradient in [`lambda_min`].
pub const LAMBDA_GRAD_TOL: f64 = 1e-12;
/// Accepted `distance(0, ∂ₓL(λ(y), y))`.
pub const LAMBDA_VERIFY_TOL: f64 = 1e-6;
const LAMBDA_MAX_ITER: usize = 20_000;
const FEASIBILITY_TOL: f64 = 1e-9;

/// Raw problem data handed to [`SaddleProblem::new`].
pub struct SaddleData {
    pub objective: Arc<ObjectiveOracle>,
    pub subgrad: Arc<SubgradOracle>,
    /// `C(s)`, each `d2 × d1`.
    pub constraints: Vec<DMatrix<f64>>,
    /// `w(s)`.
    pub targets: Vec<Point>,
    pub kernel: FiniteKernel,
    /// One point of `{x : C(s)x = w(s)}` per state; the minimum-norm solution
    /// is used when absent.
    pub feasible: Option<Vec<Point>>,
    pub eps: f64,
    pub radius: f64,
    /// Growth constant of `∂J`.
    pub growth_k: f64,
}

/// Validated problem with its averaged data.
#[derive(Clone)]
pub struct SaddleProblem {
    d1: usize,
    d2: usize,
    objective: Arc<ObjectiveOracle>,
    subgrad: Arc<SubgradOracle>,
    constraints: Vec<DMatrix<f64>>,
    targets: Vec<Point>,
    kernel: FiniteKernel,
    feasible: Vec<Point>,
    eps: f64,
    radius: f64,
    growth_k: f64,
    coercivity_level: f64,
    stationary: std::result::Result<Vec<f64>, usize>,
    optimum: Option<Point>,
}

impl fmt::Debug for SaddleProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SaddleProblem")
            .field("d1", &self.d1)
            .field("d2", &self.d2)
            .field("alphabet", &self.constraints.len())
            .field("eps", &self.eps)
            .field("radius", &self.radius)
            .field("growth_k", &self.growth_k)
            .field("stationary", &self.stationary)
            .finish_non_exhaustive()
    }
}

/// Minimum-norm solution of `C x = w`, or an error if the system is inconsistent.
pub fn min_norm_feasible(c: &DMatrix<f64>, w: &Point) -> Result<Point> {
    check_dim(c.nrows(), w.len())?;
    let svd = c.clone().svd(true, true);
    let x = svd
        .solve(w, 1e-12)
        .map_err(|e| Error::InvalidInput(format!("constraint solve failed: {e}")))?;
    let residual = (c * &x - w).norm();
    if residual > FEASIBILITY_TOL * (1.0 + w.norm()) {
        return Err(Error::InvalidInput(format!(
            "constraint system is infeasible (residual {residual:e})"
        )));
    }
    Ok(x)
}

/// `COERCIVITY_RAYS` unit directions: evenly spaced angles in 2-D, signed
/// axes plus seeded Gaussian directions otherwise.
fn ray_grid(dim: usize) -> Vec<Point> {
    if dim == 2 {
        return (0..COERCIVITY_RAYS)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / COERCIVITY_RAYS as f64;
                Point::from_row_slice(&[a.cos(), a.sin()])
            })
            .collect();
    }
    let mut rays = Vec::new();
    for i in 0..dim {
        for sign in [1.0, -1.0] {
            let mut e = Point::zeros(dim);
            e[i] = sign;
            rays.push(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5add1e);
    while rays.len() < COERCIVITY_RAYS.max(2 * dim) {
        let g = Point::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
        let n = g.norm();
        if n > 1e-12 {
            rays.push(g / n);
        }
    }
    rays
}

impl SaddleProblem {
    pub fn new(data: SaddleData) -> Result<Self> {
        let n = data.kernel.alphabet_size();
        if data.constraints.len() != n || data.targets.len() != n {
            return Err(Error::InvalidInput(format!(
                "kernel has {n} states but {} constraint matrices and {} targets were given",
                data.constraints.len(),
                data.targets.len()
            )));
        }
        for (name, v) in [("eps", data.eps), ("radius", data.radius), ("growth_k", data.growth_k)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be positive, got {v}")));
            }
        }
        let (d2, d1) = data.constraints[0].shape();
        for (c, w) in data.constraints.iter().zip(&data.targets) {
            if c.shape() != (d2, d1) {
                return Err(Error::InvalidInput(format!(
                    "constraint matrices must all be {d2}×{d1}, found {}×{}",
                    c.nrows(),
                    c.ncols()
                )));
            }
            check_dim(d2, w.len())?;
        }
        let feasible = match data.feasible {
            Some(points) => {
                if points.len() != n {
                    return Err(Error::LengthMismatch {
                        left: n,
                        right: points.len(),
                    });
                }
                for (s, x) in points.iter().enumerate() {
                    check_dim(d1, x.len())?;
                    let gap = (&data.constraints[s] * x - &data.targets[s]).norm();
                    if gap > FEASIBILITY_TOL * (1.0 + data.targets[s].norm()) {
                        return Err(Error::InvalidInput(format!(
                            "point given for state {s} violates its constraint by {gap:e}"
                        )));
                    }
                }
                points
            }
            None => data
                .constraints
                .iter()
                .zip(&data.targets)
                .map(|(c, w)| min_norm_feasible(c, w))
                .collect::<Result<Vec<_>>>()?,
        };
        let widest = feasible.iter().map(|x| x.norm()).fold(0.0, f64::max);
        if data.radius <= widest {
            return Err(Error::InvalidInput(format!(
                "radius {} must exceed the largest feasible witness norm {widest}",
                data.radius
            )));
        }
        let mut level = f64::NEG_INFINITY;
        for x in &feasible {
            for s in 0..n {
                level = level.max((data.objective)(x, s));
            }
        }
        for ray in ray_grid(d1) {
            let x = ray * data.radius;
            for s in 0..n {
                let v = (data.objective)(&x, s);
                if !(v >= level) {
                    return Err(Error::InvalidInput(format!(
                        "coercivity check failed: J = {v} < {level} on the sphere of radius {} (state {s})",
                        data.radius
                    )));
                }
            }
        }
        let p = data.kernel.matrix_at(&Point::zeros(d1), &Point::zeros(d2))?;
        let set = stationary_set(&p)?;
        let stationary = if set.is_unique() {
            Ok(set.vertices[0].clone())
        } else {
            Err(set.vertices.len())
        };
        Ok(SaddleProblem {
            d1,
            d2,
            objective: data.objective,
            subgrad: data.subgrad,
            constraints: data.constraints,
            targets: data.targets,
            kernel: data.kernel,
            feasible,
            eps: data.eps,
            radius: data.radius,
            growth_k: data.growth_k,
            coercivity_level: level,
            stationary,
            optimum: None,
        })
    }

    /// `J(x, s) = ½‖x − θ_s‖²`.
    pub fn quadratic(
        thetas: Vec<Point>,
        constraints: Vec<DMatrix<f64>>,
        targets: Vec<Point>,
        kernel: FiniteKernel,
        eps: f64,
        radius: f64,
        growth_k: f64,
    ) -> Result<Self> {
        Self::l1_quadratic(thetas, 0.0, constraints, targets, kernel, eps, radius, growth_k)
    }

    /// `J(x, s) = ½‖x − θ_s‖² + ρ‖x‖₁`.
    #[allow(clippy::too_many_arguments)]
    pub fn l1_quadratic(
        thetas: Vec<Point>,
        rho: f64,
        constraints: Vec<DMatrix<f64>>,
        targets: Vec<Point>,
        kernel: FiniteKernel,
        eps: f64,
        radius: f64,
        growth_k: f64,
    ) -> Result<Self> {
        if thetas.len() != kernel.alphabet_size() {
            return Err(Error::LengthMismatch {
                left: kernel.alphabet_size(),
                right: thetas.len(),
            });
        }
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(Error::InvalidInput(format!("l1 weight must be nonnegative, got {rho}")));
        }
        let d1 = constraints.first().map_or(0, |c| c.ncols());
        for t in &thetas {
            check_dim(d1, t.len())?;
        }
        // ‖x − θ + ρ·sgn‖ ≤ ‖x‖ + ‖θ‖ + ρ√d ≤ max(1, ‖θ‖ + ρ√d)(1 + ‖x‖).
        let needed = thetas
            .iter()
            .map(|t| t.norm() + rho * (d1 as f64).sqrt())
            .fold(1.0, f64::max);
        if growth_k < needed {
            return Err(Error::InvalidInput(format!(
                "growth constant {growth_k} is below the subgradient bound {needed}"
            )));
        }
        let th = Arc::new(thetas);
        let th2 = Arc::clone(&th);
        let objective = move |x: &Point, s: usize| 0.5 * (x - &th[s]).norm_squared() + rho * x.lp_norm(1);
        let subgrad = move |x: &Point, s: usize| {
            let grad = x - &th2[s];
            if rho == 0.0 {
                return ConvexSet::singleton(grad);
            }
            let mut center = grad;
            let mut half = vec![0.0; x.len()];
            for i in 0..x.len() {
                if x[i] == 0.0 {
                    half[i] = rho;
                } else {
                    center[i] += rho * x[i].signum();
                }
            }
            ConvexSet::cuboid(&center, &half)
        };
        Self::new(SaddleData {
            objective: Arc::new(objective),
            subgrad: Arc::new(subgrad),
            constraints,
            targets,
            kernel,
            feasible: None,
            eps,
            radius,
            growth_k,
        })
    }

    /// Two states with rows `(½, ½)`, `θ₀ = (1, 0)`, `θ₁ = (0, 1)`,
    /// `C(0) = [1 0]`, `w(0) = 2`, `C(1) = [0 1]`, `w(1) = 0`, `ε = 0.01`,
    /// `r = 4`, `K = 2`; the penalized solution is `x* = (1, 1)`.
    pub fn canonical() -> Self {
        let p = |v: &[f64]| Point::from_row_slice(v);
        let kernel = FiniteKernel::constant(vec![vec![0.5, 0.5], vec![0.5, 0.5]]).expect("stochastic rows");
        Self::quadratic(
            vec![p(&[1.0, 0.0]), p(&[0.0, 1.0])],
            vec![
                DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
                DMatrix::from_row_slice(1, 2, &[0.0, 1.0]),
            ],
            vec![p(&[2.0]), p(&[0.0])],
            kernel,
            0.01,
            4.0,
            2.0,
        )
        .expect("canonical data is valid")
        .with_optimum(p(&[1.0, 1.0]))
    }

    /// Registers an analytic minimizer of the averaged problem.
    pub fn with_optimum(mut self, x_star: Point) -> Self {
        self.optimum = Some(x_star);
        self
    }

    pub fn d1(&self) -> usize {
        self.d1
    }

    pub fn d2(&self) -> usize {
        self.d2
    }

    pub fn alphabet_size(&self) -> usize {
        self.constraints.len()
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn growth_k(&self) -> f64 {
        self.growth_k
    }

    pub fn kernel(&self) -> &FiniteKernel {
        &self.kernel
    }

    pub fn feasible_points(&self) -> &[Point] {
        &self.feasible
    }

    pub fn optimum(&self) -> Option<&Point> {
        self.optimum.as_ref()
    }

    /// `M₁ = max_{s, s'} J(x_s, s')`.
    pub fn coercivity_level(&self) -> f64 {
        self.coercivity_level
    }

    /// `ε/(2r²)`.
    pub fn penalty_coefficient(&self) -> f64 {
        self.eps / (2.0 * self.radius * self.radius)
    }

    pub fn constraint(&self, s: usize) -> &DMatrix<f64> {
        &self.constraints[s]
    }

    pub fn target(&self, s: usize) -> &Point {
        &self.targets[s]
    }

    pub fn objective(&self, x: &Point, s: usize) -> f64 {
        (self.objective)(x, s)
    }

    pub fn stationary_law(&self) -> Result<&[f64]> {
        match &self.stationary {
            Ok(mu) => Ok(mu),
            Err(count) => Err(Error::NonUniqueStationary { count: *count }),
        }
    }

    /// `C_μ = Σ μ(s)C(s)`.
    pub fn averaged_constraint(&self) -> Result<DMatrix<f64>> {
        let mu = self.stationary_law()?;
        let mut c = DMatrix::zeros(self.d2, self.d1);
        for (m, cs) in mu.iter().zip(&self.constraints) {
            c += cs * *m;
        }
        Ok(c)
    }

    /// `w_μ = Σ μ(s)w(s)`.
    pub fn averaged_target(&self) -> Result<Point> {
        let mu = self.stationary_law()?;
        let mut w = Point::zeros(self.d2);
        for (m, ws) in mu.iter().zip(&self.targets) {
            w += ws * *m;
        }
        Ok(w)
    }

    /// `J_μ(x) = Σ μ(s)J(x, s)`.
    pub fn averaged_objective(&self, x: &Point) -> Result<f64> {
        let mu = self.stationary_law()?;
        Ok(mu.iter().enumerate().map(|(s, m)| m * self.objective(x, s)).sum())
    }

    /// `Ĵ_μ(x)`.
    pub fn averaged_penalized(&self, x: &Point) -> Result<f64> {
        let mu = self.stationary_law()?;
        Ok(mu
            .iter()
            .enumerate()
            .map(|(s, m)| m * penalized_objective(self, x, s))
            .sum())
    }

    /// `∂Ĵ_μ(x) = Σ μ(s)∂Ĵ(x, s)`.
    pub fn averaged_subgrad(&self, x: &Point) -> Result<ConvexSet> {
        let mu = self.stationary_law()?;
        let sets = (0..self.alphabet_size())
            .map(|s| penalized_subgrad(self, x, s))
            .collect::<Result<Vec<_>>>()?;
        minkowski_combine(mu, &sets)
    }

    /// `K′ = max(K, r, ‖C_μᵀ‖)`.
    pub fn lambda_growth_constant(&self) -> Result<f64> {
        let c = self.averaged_constraint()?;
        Ok(self.growth_k.max(self.radius).max(c.transpose().norm()))
    }

    fn max_constraint_norm(&self) -> f64 {
        self.constraints.iter().map(|c| c.norm()).fold(0.0, f64::max)
    }

    fn max_target_norm(&self) -> f64 {
        self.targets.iter().map(|w| w.norm()).fold(0.0, f64::max)
    }
}

/// `Ĵ(x, s)`.
pub fn penalized_objective(p: &SaddleProblem, x: &Point, s: usize) -> f64 {
    let n2 = x.norm_squared();
    let r2 = p.radius * p.radius;
    p.objective(x, s) + p.penalty_coefficient() * n2 + 0.5 * (p.growth_k + 1.0) * (n2 - r2).max(0.0)
}

/// `∂Ĵ(x, s) = ∂J(x, s) ⊕ {(ε/r²)x} ⊕ P(x)` with `P(x) = {0}` inside the
/// ball, `{(K+1)x}` outside and the segment `[0, (K+1)x]` on the sphere
/// (`|‖x‖² − r²| ≤ 8·ulp·r²`).
pub fn penalized_subgrad(p: &SaddleProblem, x: &Point, s: usize) -> Result<ConvexSet> {
    check_dim(p.d1, x.len())?;
    if s >= p.alphabet_size() {
        return Err(Error::InvalidIndex {
            index: s,
            size: p.alphabet_size(),
        });
    }
    let base = (p.subgrad)(x, s)?;
    check_dim(p.d1, base.dim())?;
    let shift = x * (2.0 * p.penalty_coefficient());
    let n2 = x.norm_squared();
    let r2 = p.radius * p.radius;
    let outer = x * (p.growth_k + 1.0);
    // Points put on the sphere by rescaling miss ‖x‖² = r² by a few ulps.
    let on_sphere = (n2 - r2).abs() <= 8.0 * f64::EPSILON * r2;
    if on_sphere {
        let kink = ConvexSet::segment(Point::zeros(p.d1), outer)?;
        crate::convex_geometry::minkowski_sum(&base.translate(&shift)?, &kink)
    } else if n2 < r2 {
        base.translate(&shift)
    } else {
        base.translate(&(shift + outer))
    }
}

/// `L(x, y) = Ĵ_μ(x) + ⟨y, C_μx − w_μ⟩`.
pub fn lagrangian(p: &SaddleProblem, x: &Point, y: &Point) -> Result<f64> {
    check_dim(p.d1, x.len())?;
    check_dim(p.d2, y.len())?;
    let residual = p.averaged_constraint()? * x - p.averaged_target()?;
    Ok(p.averaged_penalized(x)? + y.dot(&residual))
}

/// `∂ₓL(x, y) = ∂Ĵ_μ(x) ⊕ {C_μᵀy}`.
pub fn lagrangian_subgrad(p: &SaddleProblem, x: &Point, y: &Point) -> Result<ConvexSet> {
    check_dim(p.d2, y.len())?;
    let shift = p.averaged_constraint()?.transpose() * y;
    p.averaged_subgrad(x)?.translate(&shift)
}

/// `λ(y) = argmin_x L(x, y)`, started from the origin.
pub fn lambda_min(p: &SaddleProblem, y: &Point) -> Result<Point> {
    lambda_min_from(p, y, &Point::zeros(p.d1))
}

/// `λ(y)` from a warm start.
///
/// The ball penalty is handled exactly: minimize `L` without it; if that
/// leaves the ball, minimize with it always on; if that falls inside, the
/// minimizer sits on the sphere and the multiplier `ν ∈ [0, K+1]` of
/// `ν/2·‖x‖²` with `‖x(ν)‖ = r` is found by bisection. Each smooth-penalty
/// subproblem is solved by steepest descent along the minimum-norm
/// subgradient with Armijo backtracking, falling back to sampled-subgradient
/// directions near kinks of `J`. The result is checked by
/// `distance(0, ∂ₓL) ≤ 1e-6`.
pub fn lambda_min_from(p: &SaddleProblem, y: &Point, start: &Point) -> Result<Point> {
    check_dim(p.d1, start.len())?;
    check_dim(p.d2, y.len())?;
    let sub = Subproblem::new(p, y)?;
    let r = p.radius;
    let inside = sub.minimize(0.0, start)?;
    let lambda = if inside.norm() <= r {
        inside
    } else {
        let top = p.growth_k + 1.0;
        let outside = sub.minimize(top, &inside)?;
        if outside.norm() >= r {
            outside
        } else {
            let (mut lo, mut hi) = (0.0, top);
            let mut x = outside;
            for _ in 0..200 {
                let nu = 0.5 * (lo + hi);
                if nu <= lo || nu >= hi {
                    break;
                }
                x = sub.minimize(nu, &x)?;
                let n = x.norm();
                if (n - r).abs() <= 1e-13 * r {
                    break;
                }
                if n > r {
                    lo = nu;
                } else {
                    hi = nu;
                }
            }
            let n = x.norm();
            x * (r / n)
        }
    };
    let residual = lagrangian_subgrad(p, &lambda, y)?.distance(&Point::zeros(p.d1))?;
    if residual > LAMBDA_VERIFY_TOL {
        return Err(Error::NonConvergence {
            what: "lambda_min",
            iterations: LAMBDA_MAX_ITER,
            residual,
        });
    }
    Ok(lambda)
}

/// `x ↦ J_μ(x) + (c + ν/2)‖x‖² + ⟨y, C_μx − w_μ⟩` for a fixed `y`.
struct Subproblem<'a> {
    p: &'a SaddleProblem,
    mu: Vec<f64>,
    y_dot_w: f64,
    c_mu_t_y: Point,
}

impl<'a> Subproblem<'a> {
    fn new(p: &'a SaddleProblem, y: &Point) -> Result<Self> {
        let c = p.averaged_constraint()?;
        let w = p.averaged_target()?;
        let c_mu_t_y = c.transpose() * y;
        Ok(Subproblem {
            p,
            mu: p.stationary_law()?.to_vec(),
            y_dot_w: y.dot(&w),
            c_mu_t_y,
        })
    }

    fn value(&self, x: &Point, nu: f64) -> f64 {
        let j: f64 = self.mu.iter().enumerate().map(|(s, m)| m * self.p.objective(x, s)).sum();
        j + (self.p.penalty_coefficient() + 0.5 * nu) * x.norm_squared() + self.c_mu_t_y.dot(x) - self.y_dot_w
    }

    fn subgrad(&self, x: &Point, nu: f64) -> Result<ConvexSet> {
        let sets = (0..self.mu.len())
            .map(|s| (self.p.subgrad)(x, s))
            .collect::<Result<Vec<_>>>()?;
        let base = minkowski_combine(&self.mu, &sets)?;
        base.translate(&(x * (2.0 * self.p.penalty_coefficient() + nu) + &self.c_mu_t_y))
    }

    fn minimize(&self, nu: f64, start: &Point) -> Result<Point> {
        let f = |x: &Point| Ok(self.value(x, nu));
        let sub = |x: &Point| self.subgrad(x, nu);
        let dim = start.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0x1a3bda);
        let mut x = start.clone();
        let mut fx = self.value(&x, nu);
        let mut step = 1.0;
        let mut last: Option<(Point, Point)> = None;
        for _ in 0..LAMBDA_MAX_ITER {
            let g = sub(&x)?.least_norm()?;
            let residual = g.norm();
            if residual <= LAMBDA_GRAD_TOL {
                return self.snap(x, nu);
            }
            // Barzilai-Borwein trial step from the previous move.
            if let Some((px, pg)) = &last {
                let s = &x - px;
                let curvature = s.dot(&(&g - pg));
                if curvature > 0.0 {
                    step = (s.norm_squared() / curvature).clamp(1e-10, 1e10);
                }
            }
            if let Some((xn, fxn, _)) = armijo(&f, &sub, &x, fx, &g, step)? {
                last = Some((x, g));
                x = xn;
                fx = fxn;
                continue;
            }
            let mut radius = residual.min(1e-2);
            let mut moved = false;
            while radius > 1e-14 {
                let mut samples = vec![g.clone()];
                for _ in 0..2 * dim + 2 {
                    let u = Point::from_fn(dim, |_, _| StandardNormal.sample(&mut rng));
                    let probe = &x + u * (radius / (dim as f64).sqrt());
                    samples.push(sub(&probe)?.least_norm()?);
                }
                let d = ConvexSet::new(samples)?.least_norm()?;
                if d.norm() > LAMBDA_GRAD_TOL {
                    if let Some((xn, fxn, _)) = armijo(&f, &sub, &x, fx, &d, step.max(1.0))? {
                        last = None;
                        x = xn;
                        fx = fxn;
                        moved = true;
                        break;
                    }
                }
                radius *= 0.1;
            }
            if !moved {
                return self.snap(x, nu);
            }
        }
        self.snap(x, nu)
    }

    /// Zeroes tiny coordinates when that lowers `distance(0, ∂)`, which lands
    /// iterates on coordinate kinks of `J`.
    fn snap(&self, x: Point, nu: f64) -> Result<Point> {
        let zeroed = x.map(|c| if c.abs() <= 1e-7 { 0.0 } else { c });
        if zeroed == x {
            return Ok(x);
        }
        let origin = Point::zeros(x.len());
        let r_x = self.subgrad(&x, nu)?.distance(&origin)?;
        let r_z = self.subgrad(&zeroed, nu)?.distance(&origin)?;
        Ok(if r_z < r_x { zeroed } else { x })
    }
}

fn armijo<F, G>(f: &F, sub: &G, x: &Point, fx: f64, d: &Point, step: f64) -> Result<Option<(Point, f64, f64)>>
where
    F: Fn(&Point) -> Result<f64>,
    G: Fn(&Point) -> Result<ConvexSet>,
{
    let d2 = d.norm_squared();
    let mut t = step;
    for _ in 0..80 {
        let xn = x - d * t;
        let fxn = f(&xn)?;
        if fxn <= fx - 1e-4 * t * d2 {
            return Ok(Some((xn, fxn, t)));
        }
        // Below the resolution of f, accept any step that shrinks the subgradient.
        if (fxn - fx).abs() <= 8.0 * f64::EPSILON * (1.0 + fx.abs()) && sub(&xn)?.least_norm()?.norm_squared() < d2 {
            return Ok(Some((xn, fxn, t)));
        }
        t *= 0.5;
    }
    Ok(None)
}

/// `Q_μ(y) = L(λ(y), y)`.
pub fn dual_value(p: &SaddleProblem, y: &Point) -> Result<f64> {
    lagrangian(p, &lambda_min(p, y)?, y)
}

/// `Q(½y₁ + ½y₂) − ½Q(y₁) − ½Q(y₂)`, nonnegative up to rounding for concave `Q`.
pub fn dual_midpoint_gap(p: &SaddleProblem, y1: &Point, y2: &Point) -> Result<f64> {
    let mid = (y1 + y2) * 0.5;
    Ok(dual_value(p, &mid)? - 0.5 * dual_value(p, y1)? - 0.5 * dual_value(p, y2)?)
}

/// The dual ODE field `y ↦ {C_μλ(y) − w_μ}`.
pub fn dual_field(p: &SaddleProblem) -> Result<MeanField> {
    let c = p.averaged_constraint()?;
    let w = p.averaged_target()?;
    let growth = c.norm() * p.lambda_growth_constant()? + w.norm();
    let problem = p.clone();
    Ok(MeanField::single_valued(p.d2, FieldKind::Slow, growth, move |y| {
        Ok(&c * lambda_min(&problem, y)? - &w)
    }))
}

/// Euler solution of `dy/dt = C_μλ(y) − w_μ`.
pub fn solve_dual_ode(p: &SaddleProblem, y0: &Point, horizon: f64, dt: f64) -> Result<DIPath> {
    di_solve(&dual_field(p)?, y0, horizon, dt, &Selection::LeastNorm)
}

/// `H₁(x, y, s) = −(∂Ĵ(x, s) ⊕ {C(s)ᵀy})`.
pub fn primal_drift(p: &SaddleProblem) -> Result<SetValuedMap> {
    let problem = p.clone();
    let growth = 2.0 * p.growth_k + 1.0 + 2.0 * p.penalty_coefficient() + p.max_constraint_norm();
    SetValuedMap::new(MapDims { d1: p.d1, d2: p.d2, k: p.d1 }, p.alphabet_size(), growth, move |x, y, s| {
        let shift = problem.constraints[s].transpose() * y;
        Ok(penalized_subgrad(&problem, x, s)?.translate(&shift)?.scale(-1.0))
    })
}

/// `H₂(x, y, s) = {C(s)x − w(s)}`.
pub fn dual_drift(p: &SaddleProblem) -> Result<SetValuedMap> {
    let problem = p.clone();
    let growth = p.max_constraint_norm().max(p.max_target_norm()).max(1e-12);
    SetValuedMap::single_valued(MapDims { d1: p.d1, d2: p.d2, k: p.d2 }, p.alphabet_size(), growth, move |x, _, s| {
        &problem.constraints[s] * x - &problem.targets[s]
    })
}

/// The recursion with both streams read from one chain.
pub fn recursion(p: &SaddleProblem) -> Result<TwoTimescaleProblem> {
    TwoTimescaleProblem::new(primal_drift(p)?, dual_drift(p)?, ChainCoupling::Shared(p.kernel.clone()))
}

/// Runs the primal-dual recursion; `config.slow_noise` is normally `None`.
pub fn run_primal_dual(p: &SaddleProblem, x0: &Point, y0: &Point, s0: usize, config: &RunConfig) -> Result<Trajectory> {
    let init = InitialState {
        x: x0.clone(),
        y: y0.clone(),
        s1: s0,
        s2: s0,
    };
    run(&recursion(p)?, &init, config)
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimalityReport {
    pub x_bar: Point,
    pub y_bar: Point,
    /// `‖C_μx̄ − w_μ‖`.
    pub feasibility_gap: f64,
    /// `|Ĵ_μ(x̄) − Q_μ(ȳ)|`.
    pub primal_dual_gap: f64,
    /// `‖x̄ − λ(ȳ)‖`.
    pub lambda_distance: f64,
    /// `J_μ(x̄) − J_μ(x*)` when an optimum is registered.
    pub eps_surplus: Option<f64>,
}

/// Report at a given primal-dual pair.
pub fn optimality_at(p: &SaddleProblem, x: &Point, y: &Point) -> Result<OptimalityReport> {
    let c = p.averaged_constraint()?;
    let w = p.averaged_target()?;
    let lambda = lambda_min_from(p, y, x)?;
    let q = lagrangian(p, &lambda, y)?;
    let eps_surplus = match &p.optimum {
        Some(star) => Some(p.averaged_objective(x)? - p.averaged_objective(star)?),
        None => None,
    };
    Ok(OptimalityReport {
        x_bar: x.clone(),
        y_bar: y.clone(),
        feasibility_gap: (&c * x - w).norm(),
        primal_dual_gap: (p.averaged_penalized(x)? - q).abs(),
        lambda_distance: (x - lambda).norm(),
        eps_surplus,
    })
}

/// Report at the means of the last `tail_fraction` of the iterates.
pub fn optimality_report(p: &SaddleProblem, traj: &Trajectory, tail_fraction: f64) -> Result<OptimalityReport> {
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return Err(Error::OutOfRange {
            value: tail_fraction,
            lo: 0.0,
            hi: 1.0,
        });
    }
    let knots = traj.steps() + 1;
    let len = ((knots as f64 * tail_fraction).floor() as usize).min(knots);
    if len == 0 {
        return Err(Error::InvalidInput("tail is empty".into()));
    }
    let (x_bar, y_bar) = tail_means(traj, knots - len..knots);
    optimality_at(p, &x_bar, &y_bar)
}

/// Means of `X` and `Y` over an index range.
pub fn tail_means(traj: &Trajectory, range: std::ops::Range<usize>) -> (Point, Point) {
    let n = range.len() as f64;
    let mut x = Point::zeros(traj.x.dim());
    let mut y = Point::zeros(traj.y.dim());
    for k in range {
        x += Point::from_row_slice(traj.x.row(k));
        y += Point::from_row_slice(traj.y.row(k));
    }
    (x / n, y / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeReport {
    /// `max_t |V(t) − V(0) − ∫₀ᵗ ‖C_μλ(y) − w_μ‖²|` with trapezoid quadrature.
    pub max_discrepancy: f64,
    /// Most negative increment `V(tᵢ₊₁) − V(tᵢ)`.
    pub min_increment: f64,
    pub nondecreasing: bool,
    pub values: Vec<f64>,
    pub integrals: Vec<f64>,
}

/// Compares `V(t) = Q_μ(y(t))` with `V(0) + ∫‖C_μλ(y) − w_μ‖²` along a dual path.
pub fn verify_envelope(p: &SaddleProblem, path: &DIPath) -> Result<EnvelopeReport> {
    if path.is_empty() {
        return Err(Error::EmptySet);
    }
    let c = p.averaged_constraint()?;
    let w = p.averaged_target()?;
    let mut values = Vec::with_capacity(path.len());
    let mut rates = Vec::with_capacity(path.len());
    let mut warm = Point::zeros(p.d1);
    for y in &path.states {
        let lambda = lambda_min_from(p, y, &warm)?;
        values.push(lagrangian(p, &lambda, y)?);
        rates.push((&c * &lambda - &w).norm_squared());
        warm = lambda;
    }
    let mut integrals = vec![0.0];
    for i in 1..path.len() {
        let h = path.times[i] - path.times[i - 1];
        integrals.push(integrals[i - 1] + 0.5 * h * (rates[i - 1] + rates[i]));
    }
    let max_discrepancy = values
        .iter()
        .zip(&integrals)
        .map(|(v, i)| (v - values[0] - i).abs())
        .fold(0.0, f64::max);
    let min_increment = values.windows(2).map(|v| v[1] - v[0]).fold(f64::INFINITY, f64::min);
    Ok(EnvelopeReport {
        max_discrepancy,
        min_increment,
        nondecreasing: values.len() < 2 || min_increment >= -1e-9,
        values,
        integrals,
    })
}

/// Hull of `∂ₓL` at sampled points, handy for plotting kinks.
pub fn subgradient_cloud(p: &SaddleProblem, xs: &[Point], y: &Point) -> Result<ConvexSet> {
    let sets = xs
        .iter()
        .map(|x| lagrangian_subgrad(p, x, y))
        .collect::<Result<Vec<_>>>()?;
    hull_of_union(&sets)
}
