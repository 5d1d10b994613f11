//! Experiment configuration documents and the problems they describe.

use std::path::PathBuf;

use anyhow::{bail, ensure, Context, Result};
use nalgebra::DMatrix;
use serde::Deserialize;

use tsinc::di_dynamics::Selection;
use tsinc::markov::FiniteKernel;
use tsinc::mean_field::{fast_field, FieldKind, MeanField};
use tsinc::saddle_opt::{dual_field, recursion, SaddleProblem};
use tsinc::set_valued_maps::{MapDims, SetValuedMap};
use tsinc::two_timescale::{
    ChainCoupling, DriftSelection, InitialState, NoiseModel, RunConfig, StepSchedule, TwoTimescaleProblem,
};
use tsinc::{ConvexSet, Point};

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    #[serde(default)]
    pub run: Option<RunSpec>,
    #[serde(default)]
    pub init: Option<InitSpec>,
    #[serde(default)]
    pub diagnostics: DiagnosticsSpec,
    #[serde(default)]
    pub di: Option<DiSpec>,
    /// Output directory, overridden by `--out` and `TSINC_OUT`.
    #[serde(default)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProblemSpec {
    Saddle(SaddleSpec),
    Affine(AffineSpec),
    Sign(SignSpec),
}

/// Either `preset: "canonical"` or the full quadratic data.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaddleSpec {
    #[serde(default)]
    pub preset: Option<String>,
    #[serde(default)]
    pub thetas: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub rho: f64,
    /// One row-major matrix per state.
    #[serde(default)]
    pub constraints: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub targets: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub kernel: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub eps: Option<f64>,
    #[serde(default)]
    pub radius: Option<f64>,
    #[serde(default)]
    pub growth_k: Option<f64>,
    #[serde(default)]
    pub optimum: Option<Vec<f64>>,
}

/// `v = A x + B y + c_s`, optionally widened by a cube of half-width `spread`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineMapSpec {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    #[serde(default)]
    pub offsets: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub spread: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AffineSpec {
    pub fast: AffineMapSpec,
    pub slow: AffineMapSpec,
    #[serde(default = "single_state")]
    pub kernel: Vec<Vec<f64>>,
}

fn single_state() -> Vec<Vec<f64>> {
    vec![vec![1.0]]
}

/// `H₁ = −g·Sgn(x − y)`, `H₂ = −g·Sgn(x)`; the inclusion for `solve-di` is `−g·Sgn(z)`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignSpec {
    pub dim: usize,
    #[serde(default = "unit")]
    pub gain: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSpec {
    pub schedule: StepSchedule,
    #[serde(default)]
    pub fast_selection: DriftSelection,
    #[serde(default)]
    pub slow_selection: DriftSelection,
    #[serde(default = "no_noise")]
    pub fast_noise: NoiseModel,
    #[serde(default = "no_noise")]
    pub slow_noise: NoiseModel,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}

fn no_noise() -> NoiseModel {
    NoiseModel::None
}

fn default_steps() -> usize {
    1000
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSpec {
    #[serde(default)]
    pub x: Option<Vec<f64>>,
    #[serde(default)]
    pub y: Option<Vec<f64>>,
    #[serde(default)]
    pub s: usize,
    #[serde(default)]
    pub s2: Option<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSpec {
    /// Width of the interpolation-gap windows on the slow clock.
    pub window: f64,
    pub apt_window: f64,
    pub apt_terms: usize,
    pub dt: f64,
    pub tail_fraction: f64,
}

impl Default for DiagnosticsSpec {
    fn default() -> Self {
        DiagnosticsSpec {
            window: 1.0,
            apt_window: 2.0,
            apt_terms: 10,
            dt: 0.01,
            tail_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum SelectionSpec {
    LeastNorm,
    Target { point: Vec<f64> },
    Param { u: Vec<f64> },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiSpec {
    pub z0: Vec<f64>,
    pub horizon: f64,
    pub dt: f64,
    #[serde(default = "least_norm")]
    pub selection: SelectionSpec,
    /// Frozen slow variable for the affine fast field.
    #[serde(default)]
    pub y: Option<Vec<f64>>,
}

fn least_norm() -> SelectionSpec {
    SelectionSpec::LeastNorm
}

impl SelectionSpec {
    pub fn to_selection(&self) -> Selection {
        match self {
            SelectionSpec::LeastNorm => Selection::LeastNorm,
            SelectionSpec::Target { point } => Selection::Target(Point::from_row_slice(point)),
            SelectionSpec::Param { u } => Selection::Param(Point::from_row_slice(u)),
        }
    }
}

/// Parses a config document, reporting the failing field path and position.
pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let mut de = serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        anyhow::anyhow!(
            "config field `{path}` (line {}, column {}): {inner}",
            inner.line(),
            inner.column()
        )
    })
}

/// A problem ready to be simulated or checked.
pub struct Built {
    pub recursion: TwoTimescaleProblem,
    pub saddle: Option<SaddleProblem>,
    /// Slow averaged field when it is available in closed form.
    pub slow_field: Option<MeanField>,
    sign: Option<SignSpec>,
}

impl Built {
    pub fn d1(&self) -> usize {
        self.recursion.d1()
    }

    pub fn d2(&self) -> usize {
        self.recursion.d2()
    }

    /// The averaged inclusion: the dual field for saddle problems, `−g·Sgn(z)`
    /// for sign problems and the fast field at the frozen `y` otherwise.
    pub fn averaged_field(&self, frozen_y: Option<&[f64]>) -> Result<MeanField> {
        if let Some(field) = &self.slow_field {
            return Ok(field.clone());
        }
        if let Some(sign) = &self.sign {
            let gain = sign.gain;
            let dim = sign.dim;
            return Ok(MeanField::new(dim, FieldKind::General, gain * (dim as f64).sqrt(), move |z| {
                sign_set(z, gain)
            }));
        }
        let y = frozen_y.map_or_else(|| Point::zeros(self.d2()), Point::from_row_slice);
        ensure!(y.len() == self.d2(), "di.y: expected {} entries, found {}", self.d2(), y.len());
        let kernel = match &self.recursion.chains {
            ChainCoupling::Shared(k) => k.clone(),
            ChainCoupling::Independent { fast, .. } => fast.clone(),
        };
        Ok(fast_field(&self.recursion.h1, &kernel, &y))
    }
}

fn point(v: &[f64]) -> Point {
    Point::from_row_slice(v)
}

fn matrix(field: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    ensure!(!rows.is_empty(), "{field}: matrix has no rows");
    let cols = rows[0].len();
    for (i, r) in rows.iter().enumerate() {
        ensure!(r.len() == cols, "{field}[{i}]: expected {cols} columns, found {}", r.len());
    }
    Ok(DMatrix::from_fn(rows.len(), cols, |i, j| rows[i][j]))
}

fn kernel(field: &str, rows: &[Vec<f64>], alphabet: usize) -> Result<FiniteKernel> {
    ensure!(
        rows.len() == alphabet,
        "{field}: expected {alphabet} rows, found {}",
        rows.len()
    );
    for (i, r) in rows.iter().enumerate() {
        ensure!(r.len() == alphabet, "{field}[{i}]: expected {alphabet} entries, found {}", r.len());
    }
    FiniteKernel::constant(rows.to_vec()).with_context(|| format!("{field}: not a stochastic matrix"))
}

fn sign_set(z: &Point, gain: f64) -> tsinc::Result<ConvexSet> {
    let mut center = Point::zeros(z.len());
    let mut half = vec![0.0; z.len()];
    for (i, v) in z.iter().enumerate() {
        if *v > 0.0 {
            center[i] = -gain;
        } else if *v < 0.0 {
            center[i] = gain;
        } else {
            half[i] = gain;
        }
    }
    ConvexSet::cuboid(&center, &half)
}

fn build_saddle(spec: &SaddleSpec) -> Result<SaddleProblem> {
    if let Some(preset) = &spec.preset {
        ensure!(preset == "canonical", "problem.preset: unknown preset `{preset}`");
        return Ok(SaddleProblem::canonical());
    }
    let need = |name: &str| anyhow::anyhow!("problem.{name}: missing (required without a preset)");
    let thetas = spec.thetas.as_ref().ok_or_else(|| need("thetas"))?;
    let alphabet = thetas.len();
    let kernel = kernel("problem.kernel", spec.kernel.as_ref().ok_or_else(|| need("kernel"))?, alphabet)?;
    let constraints = spec
        .constraints
        .as_ref()
        .ok_or_else(|| need("constraints"))?
        .iter()
        .enumerate()
        .map(|(i, c)| matrix(&format!("problem.constraints[{i}]"), c))
        .collect::<Result<Vec<_>>>()?;
    let targets = spec.targets.as_ref().ok_or_else(|| need("targets"))?;
    let mut p = SaddleProblem::l1_quadratic(
        thetas.iter().map(|t| point(t)).collect(),
        spec.rho,
        constraints,
        targets.iter().map(|t| point(t)).collect(),
        kernel,
        spec.eps.ok_or_else(|| need("eps"))?,
        spec.radius.ok_or_else(|| need("radius"))?,
        spec.growth_k.ok_or_else(|| need("growth_k"))?,
    )
    .context("problem: invalid saddle data")?;
    if let Some(x) = &spec.optimum {
        ensure!(x.len() == p.d1(), "problem.optimum: expected {} entries, found {}", p.d1(), x.len());
        p = p.with_optimum(point(x));
    }
    Ok(p)
}

fn affine_map(field: &str, spec: &AffineMapSpec, alphabet: usize, d1: usize, d2: usize) -> Result<SetValuedMap> {
    let a = matrix(&format!("{field}.x"), &spec.x)?;
    let b = matrix(&format!("{field}.y"), &spec.y)?;
    let k = a.nrows();
    ensure!(a.ncols() == d1, "{field}.x: expected {d1} columns, found {}", a.ncols());
    ensure!(b.ncols() == d2, "{field}.y: expected {d2} columns, found {}", b.ncols());
    ensure!(b.nrows() == k, "{field}.y: expected {k} rows, found {}", b.nrows());
    let offsets: Vec<Point> = match &spec.offsets {
        Some(rows) => {
            ensure!(rows.len() == alphabet, "{field}.offsets: expected {alphabet} rows, found {}", rows.len());
            rows.iter()
                .enumerate()
                .map(|(i, r)| {
                    ensure!(r.len() == k, "{field}.offsets[{i}]: expected {k} entries, found {}", r.len());
                    Ok(point(r))
                })
                .collect::<Result<_>>()?
        }
        None => vec![Point::zeros(k); alphabet],
    };
    ensure!(
        spec.spread >= 0.0 && spec.spread.is_finite(),
        "{field}.spread: must be nonnegative"
    );
    let widen = spec.spread * (k as f64).sqrt();
    let offset_norm = offsets.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let growth = a.norm().max(b.norm()).max(offset_norm + widen).max(f64::MIN_POSITIVE);
    let half = vec![spec.spread; k];
    let dims = MapDims { d1, d2, k };
    SetValuedMap::new(dims, alphabet, growth, move |x, y, s| {
        ConvexSet::cuboid(&(&a * x + &b * y + &offsets[s]), &half)
    })
    .with_context(|| format!("{field}: invalid map"))
}

fn build_sign(spec: &SignSpec) -> Result<TwoTimescaleProblem> {
    ensure!(spec.dim >= 1, "problem.dim: must be at least 1");
    ensure!(spec.gain > 0.0 && spec.gain.is_finite(), "problem.gain: must be positive");
    let d = spec.dim;
    let gain = spec.gain;
    let growth = gain * (d as f64).sqrt();
    let dims = MapDims { d1: d, d2: d, k: d };
    let h1 = SetValuedMap::new(dims, 1, growth, move |x, y, _| sign_set(&(x - y), gain))?;
    let h2 = SetValuedMap::new(dims, 1, growth, move |x, _, _| sign_set(x, gain))?;
    Ok(TwoTimescaleProblem::new(
        h1,
        h2,
        ChainCoupling::Shared(FiniteKernel::constant(vec![vec![1.0]])?),
    )?)
}

impl ProblemSpec {
    pub fn build(&self) -> Result<Built> {
        match self {
            ProblemSpec::Saddle(spec) => {
                let p = build_saddle(spec)?;
                Ok(Built {
                    recursion: recursion(&p)?,
                    slow_field: Some(dual_field(&p)?),
                    saddle: Some(p),
                    sign: None,
                })
            }
            ProblemSpec::Affine(spec) => {
                let d1 = spec.fast.x.first().map_or(0, Vec::len);
                let d2 = spec.fast.y.first().map_or(0, Vec::len);
                ensure!(d1 > 0 && d2 > 0, "problem.fast: x and y matrices must be nonempty");
                let alphabet = spec.kernel.len();
                let k = kernel("problem.kernel", &spec.kernel, alphabet)?;
                let h1 = affine_map("problem.fast", &spec.fast, alphabet, d1, d2)?;
                let h2 = affine_map("problem.slow", &spec.slow, alphabet, d1, d2)?;
                ensure!(h1.dims().k == d1, "problem.fast: output dimension must equal {d1}");
                ensure!(h2.dims().k == d2, "problem.slow: output dimension must equal {d2}");
                Ok(Built {
                    recursion: TwoTimescaleProblem::new(h1, h2, ChainCoupling::Shared(k))?,
                    saddle: None,
                    slow_field: None,
                    sign: None,
                })
            }
            ProblemSpec::Sign(spec) => Ok(Built {
                recursion: build_sign(spec)?,
                saddle: None,
                slow_field: None,
                sign: Some(spec.clone()),
            }),
        }
    }
}

impl RunSpec {
    pub fn to_config(&self, seed: Option<u64>, steps: Option<usize>) -> Result<RunConfig> {
        let s = self.schedule;
        let schedule = StepSchedule::new(s.a_exponent, s.b_exponent, s.a0, s.b0).context("run.schedule")?;
        Ok(RunConfig {
            schedule,
            fast_selection: self.fast_selection,
            slow_selection: self.slow_selection,
            fast_noise: self.fast_noise,
            slow_noise: self.slow_noise,
            steps: steps.unwrap_or(self.steps),
            seed: seed.unwrap_or(self.seed),
        })
    }
}

pub fn initial_state(init: Option<&InitSpec>, d1: usize, d2: usize) -> Result<InitialState> {
    let vec_or_zero = |field: &str, v: Option<&Vec<f64>>, d: usize| -> Result<Point> {
        match v {
            Some(v) => {
                ensure!(v.len() == d, "init.{field}: expected {d} entries, found {}", v.len());
                Ok(point(v))
            }
            None => Ok(Point::zeros(d)),
        }
    };
    let Some(init) = init else {
        return Ok(InitialState {
            x: Point::zeros(d1),
            y: Point::zeros(d2),
            s1: 0,
            s2: 0,
        });
    };
    Ok(InitialState {
        x: vec_or_zero("x", init.x.as_ref(), d1)?,
        y: vec_or_zero("y", init.y.as_ref(), d2)?,
        s1: init.s,
        s2: init.s2.unwrap_or(init.s),
    })
}

pub fn require_run(config: &ExperimentConfig) -> Result<&RunSpec> {
    match &config.run {
        Some(r) => Ok(r),
        None => bail!("config field `run`: missing (required by this command)"),
    }
}
