//! The coupled recursion driver.
//!
//! One step, with `V¹ ∈ H₁(Xₙ, Yₙ, S¹ₙ)` and `V² ∈ H₂(Xₙ, Yₙ, S²ₙ)`:
//!
//! ```text
//! X(n+1) = X(n) + a(n)·(V¹ + M¹(n+1))
//! Y(n+1) = Y(n) + b(n)·(V² + M²(n+1))
//! ```
//!
//! after which `S¹(n+1)`, `S²(n+1)` are drawn from the kernels frozen at the
//! pre-update iterates `(Xₙ, Yₙ)`.

use std::collections::HashMap;
use std::io::{self, Write};
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::convex_geometry::{ConvexSet, Point};
use crate::di_dynamics::{apt_metric, di_solve, SampledPath, Selection};
use crate::error::{check_dim, Error, Result};
use crate::markov::{sample_next, Atom, FiniteKernel, SlowMeasure};
use crate::mean_field::MeanField;
use crate::set_valued_maps::SetValuedMap;

/// `a(n) = a₀(n+1)^-α`, `b(n) = b₀(n+1)^-β`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSchedule {
    pub a_exponent: f64,
    pub b_exponent: f64,
    #[serde(default = "unit_scale")]
    pub a0: f64,
    #[serde(default = "unit_scale")]
    pub b0: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl StepSchedule {
    pub fn new(a_exponent: f64, b_exponent: f64, a0: f64, b0: f64) -> Result<Self> {
        let s = StepSchedule {
            a_exponent,
            b_exponent,
            a0,
            b0,
        };
        s.check()?;
        Ok(s)
    }

    fn check(&self) -> Result<()> {
        let (alpha, beta) = (self.a_exponent, self.b_exponent);
        if !(alpha > 0.5 && alpha <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "fast exponent must lie in (0.5, 1], got {alpha}"
            )));
        }
        if !(beta > alpha && beta <= 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "slow exponent must lie in ({alpha}, 1], got {beta}"
            )));
        }
        for (name, v) in [("a0", self.a0), ("b0", self.b0)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::InvalidSchedule(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn a(&self, n: usize) -> f64 {
        self.a0 * ((n + 1) as f64).powf(-self.a_exponent)
    }

    pub fn b(&self, n: usize) -> f64 {
        self.b0 * ((n + 1) as f64).powf(-self.b_exponent)
    }

    /// `a₀²(1 + 1/(2α − 1)) ≥ Σₙ a(n)²`.
    pub fn a_square_sum_bound(&self) -> f64 {
        self.a0 * self.a0 * (1.0 + 1.0 / (2.0 * self.a_exponent - 1.0))
    }

    pub fn b_square_sum_bound(&self) -> f64 {
        self.b0 * self.b0 * (1.0 + 1.0 / (2.0 * self.b_exponent - 1.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleReport {
    pub nonincreasing: bool,
    pub initial_ok: bool,
    pub ratio_decreasing: bool,
    /// `b(N−1)/a(N−1)`.
    pub final_ratio: f64,
    pub a_square_sum: f64,
    pub b_square_sum: f64,
    pub a_square_bound: f64,
    pub b_square_bound: f64,
}

impl ScheduleReport {
    pub fn passed(&self) -> bool {
        self.nonincreasing
            && self.initial_ok
            && self.ratio_decreasing
            && self.a_square_sum <= self.a_square_bound
            && self.b_square_sum <= self.b_square_bound
    }
}

/// Numerical check of the schedule over `horizon` steps.
pub fn validate_schedule(schedule: &StepSchedule, horizon: usize) -> Result<ScheduleReport> {
    schedule.check()?;
    if horizon < 2 {
        return Err(Error::InvalidInput("schedule check needs at least 2 steps".into()));
    }
    let mut nonincreasing = true;
    let mut ratio_decreasing = true;
    let (mut sa, mut sb) = (0.0, 0.0);
    for n in 0..horizon {
        let (a, b) = (schedule.a(n), schedule.b(n));
        sa += a * a;
        sb += b * b;
        if n > 0 {
            nonincreasing &= a <= schedule.a(n - 1) && b <= schedule.b(n - 1);
            ratio_decreasing &= b / a <= schedule.b(n - 1) / schedule.a(n - 1);
        }
    }
    Ok(ScheduleReport {
        nonincreasing,
        initial_ok: schedule.a(0) <= 1.0 && schedule.b(0) <= 1.0,
        ratio_decreasing,
        final_ratio: schedule.b(horizon - 1) / schedule.a(horizon - 1),
        a_square_sum: sa,
        b_square_sum: sb,
        a_square_bound: schedule.a_square_sum_bound(),
        b_square_bound: schedule.b_square_sum_bound(),
    })
}

/// Zero-mean iid additive noise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    None,
    /// Uniform on `[−c, c]^d`.
    Uniform { c: f64 },
    /// Coordinatewise `N(0, σ²)` clipped to `[−6σ, 6σ]`.
    Gaussian { sigma: f64 },
}

impl NoiseModel {
    fn check(&self) -> Result<()> {
        match *self {
            NoiseModel::None => Ok(()),
            NoiseModel::Uniform { c } if c >= 0.0 && c.is_finite() => Ok(()),
            NoiseModel::Gaussian { sigma } if sigma >= 0.0 && sigma.is_finite() => Ok(()),
            other => Err(Error::InvalidInput(format!("invalid noise model {other:?}"))),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, dim: usize, rng: &mut R) -> Point {
        match *self {
            NoiseModel::None => Point::zeros(dim),
            NoiseModel::Uniform { c } => {
                if c == 0.0 {
                    return Point::zeros(dim);
                }
                Point::from_fn(dim, |_, _| rng.random_range(-c..=c))
            }
            NoiseModel::Gaussian { sigma } => {
                if sigma == 0.0 {
                    return Point::zeros(dim);
                }
                let normal = Normal::new(0.0, sigma).expect("validated sigma");
                Point::from_fn(dim, |_, _| normal.sample(rng).clamp(-6.0 * sigma, 6.0 * sigma))
            }
        }
    }

    /// Almost-sure bound on `‖M‖` in dimension `dim`.
    pub fn bound(&self, dim: usize) -> f64 {
        let root = (dim as f64).sqrt();
        match *self {
            NoiseModel::None => 0.0,
            NoiseModel::Uniform { c } => c * root,
            NoiseModel::Gaussian { sigma } => 6.0 * sigma * root,
        }
    }
}

/// How `Vₙ` is picked from the drift set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftSelection {
    #[default]
    LeastNorm,
    Centroid,
    /// A uniformly chosen generator of the set.
    RandomVertex,
}

impl DriftSelection {
    fn pick<R: Rng + ?Sized>(&self, set: &ConvexSet, rng: &mut R) -> Result<Point> {
        match self {
            DriftSelection::LeastNorm => set.least_norm(),
            DriftSelection::Centroid => Ok(set.centroid()),
            DriftSelection::RandomVertex => Ok(set.points()[rng.random_range(0..set.len())].clone()),
        }
    }
}

/// Whether the two Markov streams are separate chains or one chain read twice.
#[derive(Debug, Clone)]
pub enum ChainCoupling {
    Independent { fast: FiniteKernel, slow: FiniteKernel },
    /// `S¹ = S²`, driven by one kernel.
    Shared(FiniteKernel),
}

impl ChainCoupling {
    fn kernels(&self) -> (&FiniteKernel, &FiniteKernel) {
        match self {
            ChainCoupling::Independent { fast, slow } => (fast, slow),
            ChainCoupling::Shared(k) => (k, k),
        }
    }
}

/// Drift maps and noise chains of a recursion.
#[derive(Debug, Clone)]
pub struct TwoTimescaleProblem {
    pub h1: SetValuedMap,
    pub h2: SetValuedMap,
    pub chains: ChainCoupling,
}

impl TwoTimescaleProblem {
    pub fn new(h1: SetValuedMap, h2: SetValuedMap, chains: ChainCoupling) -> Result<Self> {
        let (d1, d2) = (h1.dims(), h2.dims());
        check_dim(d1.d1, d1.k)?;
        check_dim(d2.d2, d2.k)?;
        check_dim(d1.d1, d2.d1)?;
        check_dim(d1.d2, d2.d2)?;
        let (kf, ks) = chains.kernels();
        if kf.alphabet_size() != h1.alphabet_size() || ks.alphabet_size() != h2.alphabet_size() {
            return Err(Error::InvalidInput(format!(
                "alphabet sizes disagree: kernels ({}, {}), maps ({}, {})",
                kf.alphabet_size(),
                ks.alphabet_size(),
                h1.alphabet_size(),
                h2.alphabet_size()
            )));
        }
        Ok(TwoTimescaleProblem { h1, h2, chains })
    }

    pub fn d1(&self) -> usize {
        self.h1.dims().d1
    }

    pub fn d2(&self) -> usize {
        self.h1.dims().d2
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialState {
    pub x: Point,
    pub y: Point,
    pub s1: usize,
    /// Ignored under [`ChainCoupling::Shared`].
    pub s2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub schedule: StepSchedule,
    #[serde(default)]
    pub fast_selection: DriftSelection,
    #[serde(default)]
    pub slow_selection: DriftSelection,
    pub fast_noise: NoiseModel,
    #[serde(default = "no_noise")]
    pub slow_noise: NoiseModel,
    pub steps: usize,
    pub seed: u64,
}

fn no_noise() -> NoiseModel {
    NoiseModel::None
}

/// Row-major log of equal-length vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Series {
    dim: usize,
    data: Vec<f64>,
}

impl Series {
    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Series {
            dim,
            data: Vec::with_capacity(dim * rows),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, p: &Point) {
        debug_assert_eq!(p.len(), self.dim);
        self.data.extend(p.iter());
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }

    pub fn get(&self, n: usize) -> Point {
        Point::from_row_slice(self.row(n))
    }
}

/// Logged run of the recursion; `x`, `y`, `s1`, `s2` and the clocks have
/// `N + 1` entries, the selection and noise logs `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub schedule: StepSchedule,
    pub x: Series,
    pub y: Series,
    pub s1: Vec<usize>,
    pub s2: Vec<usize>,
    pub v1: Series,
    pub v2: Series,
    pub m1: Series,
    pub m2: Series,
    pub t_fast: Vec<f64>,
    pub t_slow: Vec<f64>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.t_fast.len() - 1
    }

    pub fn final_x(&self) -> Point {
        self.x.get(self.steps())
    }

    pub fn final_y(&self) -> Point {
        self.y.get(self.steps())
    }

    /// `ȳ` against the slow clock.
    pub fn slow_path(&self) -> Result<SampledPath> {
        SampledPath::new(self.t_slow.clone(), (0..self.t_slow.len()).map(|n| self.y.get(n)).collect())
    }

    /// `x̄` against the fast clock.
    pub fn fast_path(&self) -> Result<SampledPath> {
        SampledPath::new(self.t_fast.clone(), (0..self.t_fast.len()).map(|n| self.x.get(n)).collect())
    }

    /// Largest `distance((ΔXₙ − a(n)M¹)/a(n), H₁(Xₙ, Yₙ, S¹ₙ))` and its slow
    /// counterpart: recursion membership re-verified from the logs.
    pub fn update_residual(&self, h1: &SetValuedMap, h2: &SetValuedMap) -> Result<(f64, f64)> {
        let (mut r1, mut r2): (f64, f64) = (0.0, 0.0);
        for n in 0..self.steps() {
            let (x, y) = (self.x.get(n), self.y.get(n));
            let (a, b) = (self.schedule.a(n), self.schedule.b(n));
            let dx = (self.x.get(n + 1) - &x - self.m1.get(n) * a) / a;
            let dy = (self.y.get(n + 1) - &y - self.m2.get(n) * b) / b;
            r1 = r1.max(h1.evaluate(&x, &y, self.s1[n])?.distance(&dx)?);
            r2 = r2.max(h2.evaluate(&x, &y, self.s2[n])?.distance(&dy)?);
        }
        Ok((r1, r2))
    }

    /// CSV with header `n,t_fast,t_slow,X…,Y…,S1,S2,M1…,M2…`; noise columns
    /// hold the noise used in step `n` and are empty on the last row.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let (d1, d2) = (self.x.dim(), self.y.dim());
        let mut header: Vec<String> = vec!["n".into(), "t_fast".into(), "t_slow".into()];
        header.extend((0..d1).map(|i| format!("X{i}")));
        header.extend((0..d2).map(|i| format!("Y{i}")));
        header.extend(["S1".into(), "S2".into()]);
        header.extend((0..d1).map(|i| format!("M1_{i}")));
        header.extend((0..d2).map(|i| format!("M2_{i}")));
        writeln!(out, "{}", header.join(","))?;
        let fmt = |v: &f64| format!("{v:.16e}");
        for n in 0..=self.steps() {
            let mut row = vec![n.to_string(), fmt(&self.t_fast[n]), fmt(&self.t_slow[n])];
            row.extend(self.x.row(n).iter().map(fmt));
            row.extend(self.y.row(n).iter().map(fmt));
            row.push(self.s1[n].to_string());
            row.push(self.s2[n].to_string());
            if n < self.steps() {
                row.extend(self.m1.row(n).iter().map(fmt));
                row.extend(self.m2.row(n).iter().map(fmt));
            } else {
                row.extend(std::iter::repeat_n(String::new(), d1 + d2));
            }
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// Runs `config.steps` steps of the recursion. Deterministic given the seed.
pub fn run(problem: &TwoTimescaleProblem, init: &InitialState, config: &RunConfig) -> Result<Trajectory> {
    config.schedule.check()?;
    config.fast_noise.check()?;
    config.slow_noise.check()?;
    let (d1, d2) = (problem.d1(), problem.d2());
    check_dim(d1, init.x.len())?;
    check_dim(d2, init.y.len())?;
    let (k_fast, k_slow) = problem.chains.kernels();
    let shared = matches!(problem.chains, ChainCoupling::Shared(_));
    let s2_init = if shared { init.s1 } else { init.s2 };
    for (s, size) in [(init.s1, k_fast.alphabet_size()), (s2_init, k_slow.alphabet_size())] {
        if s >= size {
            return Err(Error::InvalidIndex { index: s, size });
        }
    }
    if init.x.iter().chain(init.y.iter()).any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("initial state"));
    }

    let n = config.steps;
    let schedule = config.schedule;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut traj = Trajectory {
        schedule,
        x: Series::with_capacity(d1, n + 1),
        y: Series::with_capacity(d2, n + 1),
        s1: Vec::with_capacity(n + 1),
        s2: Vec::with_capacity(n + 1),
        v1: Series::with_capacity(d1, n),
        v2: Series::with_capacity(d2, n),
        m1: Series::with_capacity(d1, n),
        m2: Series::with_capacity(d2, n),
        t_fast: Vec::with_capacity(n + 1),
        t_slow: Vec::with_capacity(n + 1),
    };
    let (mut x, mut y) = (init.x.clone(), init.y.clone());
    let (mut s1, mut s2) = (init.s1, s2_init);
    let (mut tf, mut ts) = (0.0, 0.0);
    for step in 0..=n {
        traj.x.push(&x);
        traj.y.push(&y);
        traj.s1.push(s1);
        traj.s2.push(s2);
        traj.t_fast.push(tf);
        traj.t_slow.push(ts);
        if step == n {
            break;
        }
        let diverged = |e: Error| match e {
            Error::NonFinite(_) => Error::Divergence { step: step + 1 },
            other => other,
        };
        let h1 = problem.h1.evaluate(&x, &y, s1).map_err(diverged)?;
        let h2 = problem.h2.evaluate(&x, &y, s2).map_err(diverged)?;
        let v1 = config.fast_selection.pick(&h1, &mut rng)?;
        let v2 = config.slow_selection.pick(&h2, &mut rng)?;
        let m1 = config.fast_noise.sample(d1, &mut rng);
        let m2 = config.slow_noise.sample(d2, &mut rng);
        let (a, b) = (schedule.a(step), schedule.b(step));
        let next_x = &x + (&v1 + &m1) * a;
        let next_y = &y + (&v2 + &m2) * b;
        if next_x.iter().chain(next_y.iter()).any(|c| !c.is_finite()) {
            return Err(Error::Divergence { step: step + 1 });
        }
        let next_s1 = sample_next(k_fast, &x, &y, s1, &mut rng)?;
        let next_s2 = if shared {
            next_s1
        } else {
            sample_next(k_slow, &x, &y, s2, &mut rng)?
        };
        traj.v1.push(&v1);
        traj.v2.push(&v2);
        traj.m1.push(&m1);
        traj.m2.push(&m2);
        x = next_x;
        y = next_y;
        s1 = next_s1;
        s2 = next_s2;
        tf += a;
        ts += b;
    }
    Ok(traj)
}

/// Independent runs with the given seeds, in seed order.
pub fn run_replicas(
    problem: &TwoTimescaleProblem,
    init: &InitialState,
    config: &RunConfig,
    seeds: &[u64],
) -> Vec<Result<Trajectory>> {
    seeds
        .par_iter()
        .map(|&seed| run(problem, init, &RunConfig { seed, ..*config }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clock {
    /// `t(n) = Σ_{k<n} a(k)`, carries `X`.
    Fast,
    /// `tˢ(n) = Σ_{k<n} b(k)`, carries `Y`.
    Slow,
}

/// `x̄(t)` on the fast clock or `ȳ(t)` on the slow clock.
pub fn interpolate(traj: &Trajectory, clock: Clock, t: f64) -> Result<Point> {
    let (times, series) = match clock {
        Clock::Fast => (&traj.t_fast, &traj.x),
        Clock::Slow => (&traj.t_slow, &traj.y),
    };
    let end = *times.last().expect("trajectories are nonempty");
    if !(0.0..=end).contains(&t) {
        return Err(Error::OutOfRange { value: t, lo: 0.0, hi: end });
    }
    let i = times.partition_point(|s| *s <= t) - 1;
    if times[i] == t || i + 1 == times.len() {
        return Ok(series.get(i));
    }
    let w = (t - times[i]) / (times[i + 1] - times[i]);
    Ok(series.get(i) * (1.0 - w) + series.get(i + 1) * w)
}

/// Window statistics on the slow clock.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowGap {
    pub start: usize,
    pub start_time: f64,
    /// `sup_{0≤q≤T} ‖ȳ(tˢ(n)+q) − ỹ(q)‖`.
    pub gap: f64,
    /// `sup_k ‖Σ_{j=n}^{k−1} b(j)·M²(j+1)‖` over the same window.
    pub noise_sum: f64,
}

fn window_starts(times: &[f64], width: f64) -> Result<Vec<usize>> {
    let end = *times.last().expect("trajectories are nonempty");
    if !(width > 0.0) || width > end {
        return Err(Error::InvalidInput(format!(
            "window {width} does not fit a clock of length {end}"
        )));
    }
    let mut starts = vec![0];
    let mut n = 0;
    while times[n] + 2.0 * width <= end {
        let target = times[n] + width;
        n = times.partition_point(|s| *s < target);
        starts.push(n);
    }
    Ok(starts)
}

/// Window-by-window gap between `ȳ` and the noise-free re-integration
/// `ỹ(k+1) = ỹ(k) + b(k)·V²ₖ` from `ỹ(n) = Yₙ`, using the logged selections.
/// Windows are consecutive and non-overlapping on the slow clock.
pub fn interpolation_gap(traj: &Trajectory, width: f64) -> Result<Vec<WindowGap>> {
    let starts = window_starts(&traj.t_slow, width)?;
    let mut out = Vec::with_capacity(starts.len());
    for start in starts {
        let mut replay = traj.y.get(start);
        let mut noise = Point::zeros(traj.y.dim());
        let mut gap = 0.0;
        let mut noise_sum = 0.0;
        walk_window(traj, &traj.t_slow, start, width, |k, b| {
            replay += traj.v2.get(k) * b;
            noise += traj.m2.get(k) * b;
            (traj.y.get(k + 1) - &replay, noise.clone())
        }, |d, m| {
            gap = d;
            noise_sum = m;
        });
        out.push(WindowGap {
            start,
            start_time: traj.t_slow[start],
            gap,
            noise_sum,
        });
    }
    Ok(out)
}

/// Walks the knots of the window `[t(start), t(start) + width]`; `advance(k,
/// step)` returns the two tracked differences at knot `k + 1`. Their sup norms
/// over the window, with the right end linearly interpolated, go to `finish`.
fn walk_window<A, F>(traj: &Trajectory, times: &[f64], start: usize, width: f64, mut advance: A, finish: F)
where
    A: FnMut(usize, f64) -> (Point, Point),
    F: FnOnce(f64, f64),
{
    let stop = times[start] + width;
    let slow = std::ptr::eq(times, traj.t_slow.as_slice());
    let dim = if slow { traj.y.dim() } else { traj.x.dim() };
    let (mut prev_a, mut prev_b) = (Point::zeros(dim), Point::zeros(dim));
    let (mut sup_a, mut sup_b): (f64, f64) = (0.0, 0.0);
    let mut k = start;
    while k < traj.steps() {
        let step = if slow { traj.schedule.b(k) } else { traj.schedule.a(k) };
        let (a, b) = advance(k, step);
        if times[k + 1] > stop {
            let w = (stop - times[k]) / (times[k + 1] - times[k]);
            sup_a = sup_a.max((&prev_a * (1.0 - w) + &a * w).norm());
            sup_b = sup_b.max((&prev_b * (1.0 - w) + &b * w).norm());
            break;
        }
        sup_a = sup_a.max(a.norm());
        sup_b = sup_b.max(b.norm());
        prev_a = a;
        prev_b = b;
        k += 1;
    }
    finish(sup_a, sup_b);
}

/// `sup_k ‖Σ_{j=n}^{k−1} step(j)·M(j+1)‖` per window of the given clock
/// (right window end interpolated).
pub fn noise_partial_sums(traj: &Trajectory, clock: Clock, width: f64) -> Result<Vec<f64>> {
    let (times, noise) = match clock {
        Clock::Fast => (&traj.t_fast, &traj.m1),
        Clock::Slow => (&traj.t_slow, &traj.m2),
    };
    let starts = window_starts(times, width)?;
    let mut out = Vec::with_capacity(starts.len());
    for start in starts {
        let mut acc = Point::zeros(noise.dim());
        let mut sup = 0.0;
        walk_window(traj, times, start, width, |k, step| {
            acc += noise.get(k) * step;
            (acc.clone(), acc.clone())
        }, |s, _| sup = s);
        out.push(sup);
    }
    Ok(out)
}

/// Empirical measure on `R^d1 × S` with normalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    pub atoms: Vec<Atom>,
}

impl EmpiricalMeasure {
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }

    pub fn s_marginal(&self, alphabet: usize) -> Vec<f64> {
        let mut m = vec![0.0; alphabet];
        for a in &self.atoms {
            m[a.s] += a.weight;
        }
        m
    }

    /// Total variation distance between the `s`-marginal and `mu`.
    pub fn s_total_variation(&self, mu: &[f64]) -> f64 {
        let m = self.s_marginal(mu.len());
        0.5 * m.iter().zip(mu).map(|(a, b)| (a - b).abs()).sum::<f64>()
    }

    /// Mass of atoms whose `x` lies within `radius` of `center`.
    pub fn mass_within(&self, center: &Point, radius: f64) -> f64 {
        self.atoms
            .iter()
            .filter(|a| (&a.x - center).norm() <= radius)
            .map(|a| a.weight)
            .sum()
    }

    pub fn into_measure(self) -> SlowMeasure {
        SlowMeasure { atoms: self.atoms }
    }
}

/// Uniform-weight atoms `(Xₙ, S²ₙ)` over `window`, identical atoms merged.
pub fn occupation(traj: &Trajectory, window: Range<usize>) -> Result<EmpiricalMeasure> {
    if window.is_empty() || window.end > traj.steps() + 1 {
        return Err(Error::InvalidInput(format!(
            "window {window:?} is empty or exceeds {} knots",
            traj.steps() + 1
        )));
    }
    let weight = 1.0 / window.len() as f64;
    let mut index: HashMap<(Vec<u64>, usize), usize> = HashMap::new();
    let mut atoms: Vec<Atom> = Vec::new();
    for n in window {
        let key = (traj.x.row(n).iter().map(|c| c.to_bits()).collect(), traj.s2[n]);
        match index.get(&key) {
            Some(&i) => atoms[i].weight += weight,
            None => {
                index.insert(key, atoms.len());
                atoms.push(Atom {
                    x: traj.x.get(n),
                    s: traj.s2[n],
                    weight,
                });
            }
        }
    }
    Ok(EmpiricalMeasure { atoms })
}

/// `apt_metric(ȳ(t + ·), z)` with `z` the least-norm Euler solution of the
/// slow field from `ȳ(t)`, for each `t` in `starts`.
pub fn apt_profile(
    traj: &Trajectory,
    field: &MeanField,
    starts: &[f64],
    window: f64,
    k_terms: usize,
    dt: f64,
) -> Result<Vec<f64>> {
    let path = traj.slow_path()?;
    starts
        .iter()
        .map(|&t| {
            if t + window > path.end() {
                return Err(Error::InvalidInput(format!(
                    "window [{t}, {}] exceeds the slow clock {}",
                    t + window,
                    path.end()
                )));
            }
            let segment = path.window(t, t + window)?;
            let solution = di_solve(field, &path.at(t), window, dt, &Selection::LeastNorm)?;
            apt_metric(&segment, &solution.to_sampled(), k_terms)
        })
        .collect()
}

/// `‖Xₙ − λ(Yₙ)‖` for `n` in `range`.
pub fn tracking_distances<F>(traj: &Trajectory, range: Range<usize>, mut lambda: F) -> Result<Vec<f64>>
where
    F: FnMut(&Point) -> Result<Point>,
{
    if range.end > traj.steps() + 1 {
        return Err(Error::InvalidIndex {
            index: range.end,
            size: traj.steps() + 1,
        });
    }
    range
        .map(|n| Ok((traj.x.get(n) - lambda(&traj.y.get(n))?).norm()))
        .collect()
}

/// One row of the diagnostics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiagnosticRow {
    pub window: usize,
    pub interpolation_gap: f64,
    pub apt_metric: Option<f64>,
    pub dist_to_lambda: Option<f64>,
}

pub fn write_diagnostics_csv<W: Write>(rows: &[DiagnosticRow], mut out: W) -> io::Result<()> {
    writeln!(out, "window,interpolation_gap,apt_metric,dist_to_lambda")?;
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.16e}")).unwrap_or_default();
    for r in rows {
        writeln!(
            out,
            "{},{:.16e},{},{}",
            r.window,
            r.interpolation_gap,
            opt(r.apt_metric),
            opt(r.dist_to_lambda)
        )?;
    }
    Ok(())
}

/// Median of a nonempty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov::stationary_set;
    use crate::set_valued_maps::MapDims;

    fn pt(v: &[f64]) -> Point {
        Point::from_row_slice(v)
    }

    fn schedule(a0: f64, b0: f64) -> StepSchedule {
        StepSchedule::new(0.6, 0.9, a0, b0).unwrap()
    }

    fn dims() -> MapDims {
        MapDims { d1: 1, d2: 1, k: 1 }
    }

    fn decay_problem() -> TwoTimescaleProblem {
        let h1 = SetValuedMap::single_valued(dims(), 1, 1.0, |x, _, _| -x).unwrap();
        let h2 = SetValuedMap::single_valued(dims(), 1, 1.0, |_, y, _| -y).unwrap();
        let k = FiniteKernel::constant(vec![vec![1.0]]).unwrap();
        TwoTimescaleProblem::new(h1, h2, ChainCoupling::Shared(k)).unwrap()
    }

    fn init() -> InitialState {
        InitialState {
            x: pt(&[1.0]),
            y: pt(&[1.0]),
            s1: 0,
            s2: 0,
        }
    }

    fn config(schedule: StepSchedule, steps: usize, noise: NoiseModel) -> RunConfig {
        RunConfig {
            schedule,
            fast_selection: DriftSelection::LeastNorm,
            slow_selection: DriftSelection::LeastNorm,
            fast_noise: noise,
            slow_noise: noise,
            steps,
            seed: 11,
        }
    }

    #[test]
    fn schedule_values() {
        let s = schedule(1.0, 1.0);
        assert_eq!((s.a(0), s.b(0)), (1.0, 1.0));
        assert!((s.a(999) - 0.015848931924611134).abs() < 1e-15);
        assert!((s.b(999) - 0.001995262314968879).abs() < 1e-15);
        assert!(StepSchedule::new(0.4, 0.9, 1.0, 1.0).is_err());
        assert!(StepSchedule::new(0.6, 0.6, 1.0, 1.0).is_err());
        assert!(StepSchedule::new(0.6, 1.2, 1.0, 1.0).is_err());
        assert!(StepSchedule::new(0.6, 0.9, 1.5, 1.0).is_err());
        let report = validate_schedule(&s, 10_000).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.final_ratio < 0.07);
        assert!(validate_schedule(&s, 1).is_err());
    }

    #[test]
    fn decay_toy_product_formula() {
        let s = schedule(0.5, 0.5);
        let traj = run(&decay_problem(), &init(), &config(s, 2000, NoiseModel::None)).unwrap();
        let (mut px, mut py) = (1.0, 1.0);
        assert!(traj.final_y()[0] > 10.0 * traj.final_x()[0]);
        for n in 0..2000 {
            px *= 1.0 - s.a(n);
            py *= 1.0 - s.b(n);
            assert!(traj.x.row(n + 1)[0] <= traj.x.row(n)[0]);
            assert!(traj.y.row(n + 1)[0] <= traj.y.row(n)[0]);
            assert!((traj.x.row(n + 1)[0] - px).abs() < 1e-12);
            assert!((traj.y.row(n + 1)[0] - py).abs() < 1e-12);
            assert!(traj.y.row(n + 1)[0] >= traj.x.row(n + 1)[0]);
        }
    }

    #[test]
    fn zero_drift_is_constant_and_empty_run_is_initial() {
        let h = SetValuedMap::single_valued(dims(), 1, 1.0, |_, _, _| pt(&[0.0])).unwrap();
        let k = FiniteKernel::constant(vec![vec![1.0]]).unwrap();
        let p = TwoTimescaleProblem::new(h.clone(), h, ChainCoupling::Shared(k)).unwrap();
        let traj = run(&p, &init(), &config(schedule(1.0, 1.0), 50, NoiseModel::None)).unwrap();
        assert!((0..=50).all(|n| traj.x.row(n)[0] == 1.0 && traj.y.row(n)[0] == 1.0));
        let empty = run(&p, &init(), &config(schedule(1.0, 1.0), 0, NoiseModel::None)).unwrap();
        assert_eq!(empty.steps(), 0);
        assert_eq!(empty.final_x(), pt(&[1.0]));
        assert_eq!(empty.t_slow, vec![0.0]);
    }

    #[test]
    fn update_identity_and_determinism() {
        let cfg = config(schedule(0.5, 0.5), 3000, NoiseModel::Uniform { c: 0.1 });
        let p = decay_problem();
        let a = run(&p, &init(), &cfg).unwrap();
        let b = run(&p, &init(), &cfg).unwrap();
        assert_eq!(a, b);
        let (r1, r2) = a.update_residual(&p.h1, &p.h2).unwrap();
        assert!(r1 <= 1e-8 && r2 <= 1e-8);
        let c = run(&p, &init(), &RunConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.x, c.x);
        let replicas = run_replicas(&p, &init(), &cfg, &[11, 12]);
        assert_eq!(replicas[0].as_ref().unwrap(), &a);
        assert_eq!(replicas[1].as_ref().unwrap(), &c);
    }

    #[test]
    fn divergence_reports_step() {
        let h1 = SetValuedMap::single_valued(dims(), 1, 1.0, |x, _, _| x * 1e200).unwrap();
        let h2 = SetValuedMap::single_valued(dims(), 1, 1.0, |_, _, _| pt(&[0.0])).unwrap();
        let k = FiniteKernel::constant(vec![vec![1.0]]).unwrap();
        let p = TwoTimescaleProblem::new(h1, h2, ChainCoupling::Shared(k)).unwrap();
        let err = run(&p, &init(), &config(schedule(1.0, 1.0), 100, NoiseModel::None)).unwrap_err();
        assert!(matches!(err, Error::Divergence { step } if (1..=3).contains(&step)));
    }

    #[test]
    fn interpolation_examples() {
        let h1 = SetValuedMap::single_valued(dims(), 1, 1.0, |_, _, _| pt(&[0.0])).unwrap();
        let h2 = SetValuedMap::single_valued(dims(), 1, 1.0, |_, _, _| pt(&[1.0])).unwrap();
        let k = FiniteKernel::constant(vec![vec![1.0]]).unwrap();
        let p = TwoTimescaleProblem::new(h1, h2, ChainCoupling::Shared(k)).unwrap();
        let start = InitialState {
            x: pt(&[0.0]),
            y: pt(&[0.0]),
            s1: 0,
            s2: 0,
        };
        let traj = run(&p, &start, &config(schedule(1.0, 1.0), 5, NoiseModel::None)).unwrap();
        assert_eq!(interpolate(&traj, Clock::Slow, 0.5).unwrap(), pt(&[0.5]));
        for n in 0..=5 {
            assert_eq!(interpolate(&traj, Clock::Slow, traj.t_slow[n]).unwrap(), traj.y.get(n));
        }
        assert!(interpolate(&traj, Clock::Slow, traj.t_slow[5] + 1e-9).is_err());
        assert!(interpolate(&traj, Clock::Fast, -0.1).is_err());
    }

    #[test]
    fn noise_free_gap_is_zero() {
        let traj = run(&decay_problem(), &init(), &config(schedule(0.5, 0.5), 20_000, NoiseModel::None)).unwrap();
        let gaps = interpolation_gap(&traj, 1.0).unwrap();
        assert!(gaps.len() > 3);
        assert!(gaps.iter().all(|g| g.gap == 0.0 && g.noise_sum == 0.0));
        assert!(interpolation_gap(&traj, 1e6).is_err());
    }

    #[test]
    fn noisy_gap_matches_noise_partial_sums() {
        let cfg = config(schedule(0.5, 0.5), 20_000, NoiseModel::Uniform { c: 0.1 });
        let traj = run(&decay_problem(), &init(), &cfg).unwrap();
        let gaps = interpolation_gap(&traj, 1.0).unwrap();
        let sums = noise_partial_sums(&traj, Clock::Slow, 1.0).unwrap();
        assert_eq!(gaps.len(), sums.len());
        let mut positive = 0;
        for (g, s) in gaps.iter().zip(&sums) {
            // With logged selections the gap at each knot is the noise partial sum.
            assert!((g.gap - s).abs() <= 1e-12, "{} vs {s}", g.gap);
            assert_eq!(g.noise_sum, *s);
            positive += usize::from(*s > 0.0);
        }
        assert_eq!(positive, sums.len());
    }

    #[test]
    fn single_step_window_gap() {
        let cfg = config(schedule(0.5, 0.5), 5, NoiseModel::Uniform { c: 0.1 });
        let traj = run(&decay_problem(), &init(), &cfg).unwrap();
        let b0 = traj.schedule.b(0);
        let gaps = interpolation_gap(&traj, b0).unwrap();
        let expected = b0 * traj.m2.get(0).norm();
        assert!((gaps[0].gap - expected).abs() < 1e-15);
    }

    #[test]
    fn fast_noise_sums_shrink_over_thirds() {
        let cfg = config(schedule(0.5, 0.5), 60_000, NoiseModel::Uniform { c: 0.5 });
        let traj = run(&decay_problem(), &init(), &cfg).unwrap();
        let sums = noise_partial_sums(&traj, Clock::Fast, 1.0).unwrap();
        let third = sums.len() / 3;
        let maxes: Vec<f64> = sums
            .chunks(third)
            .take(3)
            .map(|c| c.iter().copied().fold(0.0, f64::max))
            .collect();
        assert!(maxes[2] < maxes[0], "{maxes:?}");
    }

    #[test]
    fn occupation_examples() {
        let h = SetValuedMap::single_valued(dims(), 2, 1.0, |_, _, _| pt(&[0.0])).unwrap();
        let k = FiniteKernel::constant(vec![vec![0.5, 0.5], vec![0.25, 0.75]]).unwrap();
        let p = TwoTimescaleProblem::new(h.clone(), h, ChainCoupling::Shared(k.clone())).unwrap();
        let traj = run(&p, &init(), &config(schedule(1.0, 1.0), 100_000, NoiseModel::None)).unwrap();
        let single = occupation(&traj, 7..8).unwrap();
        assert_eq!(single.atoms.len(), 1);
        assert_eq!(single.total_mass(), 1.0);

        let whole = occupation(&traj, 0..traj.steps() + 1).unwrap();
        assert!(whole.atoms.len() <= 2);
        assert!((whole.total_mass() - 1.0).abs() < 1e-12);
        let mu = stationary_set(&k.matrix_at(&pt(&[0.0]), &pt(&[0.0])).unwrap()).unwrap();
        assert!(whole.s_total_variation(mu.unique().unwrap()) < 0.05);
        assert!((whole.mass_within(&pt(&[1.0]), 1e-12) - 1.0).abs() < 1e-9);
        assert!(occupation(&traj, 5..5).is_err());
    }

    #[test]
    fn tracking_and_apt_on_decay() {
        let cfg = config(schedule(0.5, 0.5), 20_000, NoiseModel::None);
        let traj = run(&decay_problem(), &init(), &cfg).unwrap();
        let n = traj.steps();
        let d = tracking_distances(&traj, n - 100..n + 1, |_| Ok(pt(&[0.0]))).unwrap();
        assert!(d.iter().all(|v| *v < 1e-2));
        let field = MeanField::single_valued(1, crate::mean_field::FieldKind::Slow, 1.0, |y| Ok(-y));
        let end = *traj.t_slow.last().unwrap();
        let profile = apt_profile(&traj, &field, &[end / 2.0, end - 2.0], 2.0, 10, 0.01).unwrap();
        assert!(profile.iter().all(|v| *v < 0.05), "{profile:?}");
        assert!(apt_profile(&traj, &field, &[end - 1.0], 2.0, 10, 0.01).is_err());
    }

    #[test]
    fn csv_outputs() {
        let traj = run(&decay_problem(), &init(), &config(schedule(1.0, 1.0), 3, NoiseModel::Uniform { c: 0.1 })).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "n,t_fast,t_slow,X0,Y0,S1,S2,M1_0,M2_0");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].ends_with(",,"));
        let mut buf = Vec::new();
        write_diagnostics_csv(
            &[DiagnosticRow {
                window: 0,
                interpolation_gap: 0.0,
                apt_metric: None,
                dist_to_lambda: Some(0.5),
            }],
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "0,0.0000000000000000e0,,5.0000000000000000e-1");
    }

    #[test]
    fn median_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
