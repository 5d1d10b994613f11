//! Explicit Euler solutions of `dz/dt ∈ M(z)` with a selection rule, plus the
//! dynamical diagnostics built on them: limit sets, sampled attractor checks,
//! a chain-recurrence falsifier and the pseudotrajectory metric.

use std::collections::VecDeque;
use std::io::{self, Write};

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::convex_geometry::Point;
use crate::error::{check_dim, Error, Result};
use crate::mean_field::MeanField;
use crate::set_valued_maps::parametrize;

/// Step-size warning threshold for `dt·K·(1 + max‖z‖)`.
pub const STEP_WARN_LEVEL: f64 = 0.1;

/// How the velocity is picked out of `M(z)` at each Euler step.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// `project(M(z), 0)`.
    LeastNorm,
    /// `project(M(z), (p − z)/max(dt, ‖p − z‖))`.
    Target(Point),
    /// Parametrization at a fixed `u` in the unit ball.
    Param(Point),
}

/// Euler polygon of a differential inclusion.
#[derive(Debug, Clone, PartialEq)]
pub struct DIPath {
    pub times: Vec<f64>,
    pub states: Vec<Point>,
    /// `velocities[i] ∈ M(states[i])`; the last one is the selection at the
    /// final state and is not used for stepping.
    pub velocities: Vec<Point>,
}

impl DIPath {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |z| z.len())
    }

    pub fn final_state(&self) -> &Point {
        self.states.last().expect("paths are never empty")
    }

    pub fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0) - self.times.first().copied().unwrap_or(0.0)
    }

    /// `max_i ‖z_{i+1} − z_i − (t_{i+1} − t_i)·v_i‖∞`; zero for solver output.
    pub fn euler_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.len().saturating_sub(1) {
            let h = self.times[i + 1] - self.times[i];
            let predicted = &self.states[i] + &self.velocities[i] * h;
            worst = worst.max((&self.states[i + 1] - predicted).amax());
        }
        worst
    }

    /// `max_i distance(v_i, M(z_i))`.
    pub fn velocity_gap(&self, field: &MeanField) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for (z, v) in self.states.iter().zip(&self.velocities) {
            worst = worst.max(field.evaluate(z)?.distance(v)?);
        }
        Ok(worst)
    }

    pub fn to_sampled(&self) -> SampledPath {
        SampledPath {
            times: self.times.clone(),
            values: self.states.clone(),
        }
    }

    /// CSV with header `t,z0,…,v0,…` and one row per knot.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        let k = self.dim();
        let mut header = vec!["t".to_string()];
        header.extend((0..k).map(|i| format!("z{i}")));
        header.extend((0..k).map(|i| format!("v{i}")));
        writeln!(out, "{}", header.join(","))?;
        for ((t, z), v) in self.times.iter().zip(&self.states).zip(&self.velocities) {
            let mut row = vec![format!("{t:.16e}")];
            row.extend(z.iter().map(|c| format!("{c:.16e}")));
            row.extend(v.iter().map(|c| format!("{c:.16e}")));
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

fn select(field: &MeanField, z: &Point, dt: f64, selection: &Selection) -> Result<Point> {
    let value = field.evaluate(z)?;
    match selection {
        Selection::LeastNorm => value.least_norm(),
        Selection::Target(p) => {
            check_dim(z.len(), p.len())?;
            let gap = p - z;
            let scale = dt.max(gap.norm());
            value.project(&(gap / scale))
        }
        Selection::Param(u) => parametrize(&value, u, 2.0 * field.growth_bound(z)),
    }
}

/// Euler scheme on `[0, horizon]` with `round(horizon/dt)` equal steps.
pub fn di_solve(field: &MeanField, z0: &Point, horizon: f64, dt: f64, selection: &Selection) -> Result<DIPath> {
    check_dim(field.dim(), z0.len())?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidInput(format!("step must be positive, got {dt}")));
    }
    if !(horizon >= dt && horizon.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "horizon {horizon} must be finite and at least the step {dt}"
        )));
    }
    if z0.iter().any(|c| !c.is_finite()) {
        return Err(Error::NonFinite("initial state"));
    }
    let initial = field.evaluate(z0)?;
    let bound = field.growth_bound(z0);
    if initial.max_norm() > bound * (1.0 + 1e-9) {
        return Err(Error::InvalidInput(format!(
            "field violates its growth bound at the initial state ({} > {bound})",
            initial.max_norm()
        )));
    }

    let steps = ((horizon / dt).round() as usize).max(1);
    let h = horizon / steps as f64;
    let mut times = Vec::with_capacity(steps + 1);
    let mut states = Vec::with_capacity(steps + 1);
    let mut velocities = Vec::with_capacity(steps + 1);
    let mut z = z0.clone();
    let mut max_norm = z.norm();
    for i in 0..=steps {
        let t = i as f64 * h;
        let v = select(field, &z, h, selection)?;
        times.push(t);
        states.push(z.clone());
        velocities.push(v.clone());
        if i == steps {
            break;
        }
        let dt_i = (i + 1) as f64 * h - t;
        let next = &z + &v * dt_i;
        if next.iter().any(|c| !c.is_finite()) {
            return Err(Error::Divergence { step: i + 1 });
        }
        z = next;
        max_norm = max_norm.max(z.norm());
    }
    let level = h * field.growth_k() * (1.0 + max_norm);
    if level > STEP_WARN_LEVEL {
        warn!("Euler step {h} is coarse for this field (dt·K·(1 + max‖z‖) = {level:.3})");
    }
    Ok(DIPath {
        times,
        states,
        velocities,
    })
}

/// States after `burn_in`, greedily clustered at radius `tol/2`.
pub fn limit_set(path: &DIPath, burn_in: f64, tol: f64) -> Result<Vec<Point>> {
    let end = path.times.last().copied().unwrap_or(f64::NEG_INFINITY);
    if burn_in > end {
        return Err(Error::InvalidInput(format!(
            "burn-in {burn_in} leaves no tail on a path of horizon {}",
            path.horizon()
        )));
    }
    let mut reps: Vec<Point> = Vec::new();
    for (t, z) in path.times.iter().zip(&path.states) {
        if *t < burn_in {
            continue;
        }
        if !reps.iter().any(|r| (r - z).norm() <= 0.5 * tol) {
            reps.push(z.clone());
        }
    }
    if reps.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(reps)
}

fn cloud_distance(z: &Point, cloud: &[Point]) -> f64 {
    cloud.iter().map(|a| (z - a).norm()).fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttractorStatus {
    Attracting,
    NotAttracting,
    /// Some path was still outside `N^ε(A)` at the end of the budget but
    /// getting closer.
    Inconclusive,
}

#[derive(Debug, Clone)]
pub struct AttractorReport {
    pub status: AttractorStatus,
    /// Latest entry time into `N^ε(A)` over all sampled paths (`∞` if some path never settles).
    pub worst_entry_time: f64,
    pub worst_final_distance: f64,
    /// Path with the latest entry time.
    pub witness: DIPath,
    pub paths_run: usize,
}

impl AttractorReport {
    pub fn is_attracting(&self) -> bool {
        self.status == AttractorStatus::Attracting
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttractorProbe {
    pub radius: f64,
    pub eps: f64,
    pub t_max: f64,
    pub n_starts: usize,
    pub dt: f64,
    pub seed: u64,
}

fn unit_ball_point(dim: usize, rng: &mut ChaCha8Rng) -> Point {
    loop {
        let g = Point::from_fn(dim, |_, _| StandardNormal.sample(rng));
        let n = g.norm();
        if n > 1e-12 {
            let r: f64 = rng.random::<f64>().powf(1.0 / dim as f64);
            return g * (r / n);
        }
    }
}

/// Sampled test of whether `A` attracts its `radius`-neighborhood.
///
/// Each start is followed under least-norm and four random `param(u)`
/// selections for `2·t_max`; a path passes if it is inside `N^ε(A)` from some
/// time `≤ t_max` on.
pub fn attractor_check(field: &MeanField, attractor: &[Point], probe: &AttractorProbe) -> Result<AttractorReport> {
    let first = attractor.first().ok_or(Error::EmptySet)?;
    let dim = first.len();
    check_dim(field.dim(), dim)?;
    if probe.n_starts == 0 {
        return Err(Error::InvalidInput("need at least one start".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut status = AttractorStatus::Attracting;
    let mut worst: Option<(f64, f64, DIPath)> = None;
    let mut paths_run = 0;
    for _ in 0..probe.n_starts {
        let anchor = &attractor[rng.random_range(0..attractor.len())];
        let start = anchor + unit_ball_point(dim, &mut rng) * probe.radius;
        let mut selections = vec![Selection::LeastNorm];
        selections.extend((0..4).map(|_| Selection::Param(unit_ball_point(dim, &mut rng))));
        for selection in &selections {
            paths_run += 1;
            let outcome = match di_solve(field, &start, 2.0 * probe.t_max, probe.dt, selection) {
                Ok(path) => path,
                Err(Error::Divergence { .. }) => {
                    status = AttractorStatus::NotAttracting;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let dists: Vec<f64> = outcome.states.iter().map(|z| cloud_distance(z, attractor)).collect();
            let last_out = dists.iter().rposition(|d| *d > probe.eps);
            let entry = match last_out {
                None => 0.0,
                Some(i) if i + 1 < dists.len() => outcome.times[i + 1],
                Some(_) => f64::INFINITY,
            };
            let final_d = *dists.last().expect("nonempty path");
            if entry > probe.t_max {
                let shrinking = final_d < dists[0] && final_d <= dists[dists.len() * 3 / 4];
                let path_status = if shrinking {
                    AttractorStatus::Inconclusive
                } else {
                    AttractorStatus::NotAttracting
                };
                if path_status == AttractorStatus::NotAttracting || status == AttractorStatus::Attracting {
                    status = path_status;
                }
            }
            let replace = worst
                .as_ref()
                .is_none_or(|(e, d, _)| entry > *e || (entry == *e && final_d > *d));
            if replace {
                worst = Some((entry, final_d, outcome));
            }
        }
    }
    let (worst_entry_time, worst_final_distance, witness) = match worst {
        Some(w) => w,
        None => {
            return Err(Error::Divergence { step: 0 });
        }
    };
    Ok(AttractorReport {
        status,
        worst_entry_time,
        worst_final_distance,
        witness,
        paths_run,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChainOutcome {
    /// Indices into the limit-set cloud, from the source to the target.
    Found(Vec<usize>),
    /// No chain within the budget; this does not disprove chain transitivity.
    NotFound,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainProbe {
    pub eps: f64,
    pub duration: f64,
    pub dt: f64,
    /// Maximum number of solves.
    pub budget: usize,
    /// Random `param(u)` selections tried from each point besides least-norm.
    pub branching: usize,
    pub seed: u64,
}

/// Breadth-first search for an `(ε, T)`-chain inside `cloud` from
/// `cloud[from]` to `cloud[to]`: each hop follows a sampled solution of
/// duration `T` and jumps to a cloud point within `ε` of its end.
pub fn find_chain(field: &MeanField, cloud: &[Point], from: usize, to: usize, probe: &ChainProbe) -> Result<ChainOutcome> {
    for idx in [from, to] {
        if idx >= cloud.len() {
            return Err(Error::InvalidIndex {
                index: idx,
                size: cloud.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let mut parent: Vec<Option<usize>> = vec![None; cloud.len()];
    let mut seen = vec![false; cloud.len()];
    seen[from] = true;
    let mut queue = VecDeque::from([from]);
    let mut solves = 0;
    while let Some(i) = queue.pop_front() {
        let dim = cloud[i].len();
        let mut selections = vec![Selection::LeastNorm];
        selections.extend((0..probe.branching).map(|_| Selection::Param(unit_ball_point(dim, &mut rng))));
        for selection in &selections {
            if solves >= probe.budget {
                return Ok(ChainOutcome::NotFound);
            }
            solves += 1;
            let path = di_solve(field, &cloud[i], probe.duration, probe.dt, selection)?;
            let end = path.final_state();
            for (j, p) in cloud.iter().enumerate() {
                if seen[j] || (p - end).norm() > probe.eps {
                    continue;
                }
                seen[j] = true;
                parent[j] = Some(i);
                if j == to {
                    let mut hops = vec![to];
                    let mut cur = to;
                    while let Some(p) = parent[cur] {
                        hops.push(p);
                        cur = p;
                    }
                    hops.reverse();
                    return Ok(ChainOutcome::Found(hops));
                }
                queue.push_back(j);
            }
        }
    }
    Ok(ChainOutcome::NotFound)
}

/// Piecewise-linear path through `(times[i], values[i])`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    times: Vec<f64>,
    values: Vec<Point>,
}

impl SampledPath {
    pub fn new(times: Vec<f64>, values: Vec<Point>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::EmptySet);
        }
        if times.len() != values.len() {
            return Err(Error::LengthMismatch {
                left: times.len(),
                right: values.len(),
            });
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidInput("times must be strictly increasing".into()));
        }
        let dim = values[0].len();
        for v in &values {
            check_dim(dim, v.len())?;
        }
        Ok(SampledPath { times, values })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Point] {
        &self.values
    }

    pub fn start(&self) -> f64 {
        self.times[0]
    }

    pub fn end(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    /// Linear interpolation, constant outside the sampled range.
    pub fn at(&self, t: f64) -> Point {
        if t <= self.times[0] {
            return self.values[0].clone();
        }
        let n = self.times.len();
        if t >= self.times[n - 1] {
            return self.values[n - 1].clone();
        }
        let i = self.times.partition_point(|s| *s <= t) - 1;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let w = (t - t0) / (t1 - t0);
        &self.values[i] * (1.0 - w) + &self.values[i + 1] * w
    }

    /// Restriction to `[from, to]`, re-based so that it starts at time 0.
    pub fn window(&self, from: f64, to: f64) -> Result<SampledPath> {
        if !(to > from) {
            return Err(Error::InvalidInput(format!("empty window [{from}, {to}]")));
        }
        let mut times = vec![0.0];
        let mut values = vec![self.at(from)];
        for (t, v) in self.times.iter().zip(&self.values) {
            if *t > from && *t < to {
                times.push(t - from);
                values.push(v.clone());
            }
        }
        times.push(to - from);
        values.push(self.at(to));
        SampledPath::new(times, values)
    }
}

/// `Σ_{k=1..K} 2^-k · min(sup_{[0, min(k, T_w)]} ‖f − g‖, 1)` on a common
/// window `[t₀, t₀ + T_w]`, times measured from `t₀`.
///
/// The difference of two piecewise-linear paths is piecewise linear on the
/// merged grid, so the sup is attained on merged knots or window cuts.
pub fn apt_metric(f: &SampledPath, g: &SampledPath, k_terms: usize) -> Result<f64> {
    if k_terms == 0 {
        return Err(Error::InvalidInput("need at least one term".into()));
    }
    let scale = 1.0 + f.start().abs().max(f.end().abs());
    if (f.start() - g.start()).abs() > 1e-9 * scale || (f.end() - g.end()).abs() > 1e-9 * scale {
        return Err(Error::InvalidInput(format!(
            "window mismatch: [{}, {}] vs [{}, {}]",
            f.start(),
            f.end(),
            g.start(),
            g.end()
        )));
    }
    check_dim(f.values[0].len(), g.values[0].len())?;
    let t0 = f.start();
    let width = f.end() - t0;
    let mut grid: Vec<f64> = f.times.iter().chain(&g.times).map(|t| t - t0).collect();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let gap = |s: f64| (f.at(t0 + s) - g.at(t0 + s)).norm();
    let gaps: Vec<f64> = grid.iter().map(|s| gap(*s)).collect();
    let mut total = 0.0;
    let mut weight = 1.0;
    for k in 1..=k_terms {
        weight *= 0.5;
        let cut = (k as f64).min(width);
        let mut sup = gap(cut);
        for (s, d) in grid.iter().zip(&gaps) {
            if *s > cut {
                break;
            }
            sup = sup.max(*d);
        }
        total += weight * sup.min(1.0);
    }
    Ok(total)
}
