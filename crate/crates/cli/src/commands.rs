//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use tsinc::di_dynamics::di_solve;
use tsinc::mean_field::{check_marchaud, FieldSequence, MeanField};
use tsinc::saddle_opt::{lambda_min, lambda_min_from, optimality_at, tail_means, verify_envelope, SaddleProblem};
use tsinc::set_valued_maps::{validate_sam, Probe, ProbeSequence, SetValuedMap};
use tsinc::two_timescale::{
    apt_profile, interpolation_gap, occupation, run_replicas, validate_schedule, write_diagnostics_csv,
    DiagnosticRow, Trajectory,
};
use tsinc::{Error, Point};

use crate::config::{self, Built, DiagnosticsSpec, ExperimentConfig};
use crate::output::{config_hash, create_dir, output_dir, write_csv, write_json};
use crate::{CommonArgs, RunArgs, Status};

/// An error together with the exit status it maps to.
pub struct Failure {
    pub status: Status,
    pub error: anyhow::Error,
}

type Outcome = std::result::Result<Status, Failure>;

trait Classify<T> {
    fn or_status(self, status: Status) -> std::result::Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for std::result::Result<T, E> {
    fn or_status(self, status: Status) -> std::result::Result<T, Failure> {
        self.map_err(|e| Failure {
            status,
            error: e.into(),
        })
    }
}

fn core_failure(e: Error) -> Failure {
    let status = match e {
        Error::Divergence { .. } => Status::Diverged,
        _ => Status::Invalid,
    };
    Failure {
        status,
        error: e.into(),
    }
}

struct Loaded {
    path: PathBuf,
    hash: String,
    config: ExperimentConfig,
    out: PathBuf,
}

fn load(common: &CommonArgs) -> std::result::Result<Loaded, Failure> {
    let bytes = fs::read(&common.config)
        .map_err(|e| anyhow::anyhow!("reading {}: {e}", common.config.display()))
        .or_status(Status::Io)?;
    let text = String::from_utf8(bytes.clone()).or_status(Status::Invalid)?;
    let config = config::parse(&text).or_status(Status::Invalid)?;
    let out = output_dir(common.out.as_deref(), config.output.as_deref());
    create_dir(&out).or_status(Status::Io)?;
    Ok(Loaded {
        path: common.config.clone(),
        hash: config_hash(&bytes),
        config,
        out,
    })
}

fn manifest(command: &str, loaded: &Loaded, status: &str, extra: Value) -> Value {
    let mut m = json!({
        "command": command,
        "version": tsinc::VERSION,
        "config": loaded.path.display().to_string(),
        "config_sha256": loaded.hash,
        "status": status,
    });
    if let (Value::Object(m), Value::Object(extra)) = (&mut m, extra) {
        m.extend(extra);
    }
    m
}

/// Probe values `a·(1 + 0.3 i)` per coordinate.
fn ramp(dim: usize, a: f64) -> Point {
    Point::from_fn(dim, |i, _| a * (1.0 + 0.3 * i as f64))
}

const GRID: [f64; 5] = [-2.0, -0.5, 0.0, 0.75, 2.0];
const GRAPH_TOL: f64 = 1e-6;

fn check_map(map: &SetValuedMap) -> tsinc::Result<(bool, String)> {
    let dims = map.dims();
    let mut grid = Vec::new();
    for a in GRID {
        for b in GRID {
            for s in 0..map.alphabet_size() {
                grid.push(Probe::new(ramp(dims.d1, a), ramp(dims.d2, b), s));
            }
        }
    }
    let mut sequences = Vec::new();
    for a in GRID {
        let limit = Probe::new(ramp(dims.d1, a), ramp(dims.d2, -a), 0);
        let mut terms = Vec::new();
        for k in 1..=40 {
            let h = 0.5f64.powi(k);
            let p = Probe::new(&limit.x + Point::from_element(dims.d1, h), &limit.y - Point::from_element(dims.d2, h), 0);
            let z = map.evaluate(&p.x, &p.y, 0)?.least_norm()?;
            terms.push((p, z));
        }
        let z = terms.last().expect("forty terms").1.clone();
        sequences.push(ProbeSequence { terms, limit: (limit, z) });
    }
    let report = validate_sam(map, &grid, &sequences, GRAPH_TOL)?;
    Ok((
        report.passed(),
        format!(
            "{} probes, growth violations {}, closed-graph residual {:.2e}",
            grid.len(),
            report.growth_violations.len(),
            report.closed_graph_worst
        ),
    ))
}

fn check_field(field: &MeanField) -> tsinc::Result<(bool, String)> {
    let grid: Vec<Point> = GRID.iter().map(|&a| ramp(field.dim(), a)).collect();
    let mut sequences = Vec::new();
    for z in grid.iter().take(3) {
        let mut terms = Vec::new();
        for k in 1..=30 {
            let zn = z + Point::from_element(z.len(), 0.5f64.powi(k));
            let v = field.evaluate(&zn)?.least_norm()?;
            terms.push((zn, v));
        }
        let v = terms.last().expect("thirty terms").1.clone();
        sequences.push(FieldSequence {
            terms,
            limit: (z.clone(), v),
        });
    }
    let report = check_marchaud(field, &grid, &sequences, GRAPH_TOL)?;
    Ok((
        report.passed(),
        format!(
            "growth ratio {:.3}, closed-graph residual {:.2e}",
            report.worst_growth_ratio, report.closed_graph_worst
        ),
    ))
}

struct Check {
    name: &'static str,
    passed: bool,
    detail: String,
}

impl Check {
    fn from(name: &'static str, result: tsinc::Result<(bool, String)>) -> Self {
        match result {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: e.to_string(),
            },
        }
    }
}

pub fn validate(common: &CommonArgs, steps: Option<usize>) -> Outcome {
    let loaded = load(common)?;
    let config = &loaded.config;
    let mut checks = Vec::new();
    match config.problem.build() {
        Ok(built) => {
            checks.push(Check {
                name: "problem",
                passed: true,
                detail: format!("d1 = {}, d2 = {}", built.d1(), built.d2()),
            });
            checks.push(Check::from("fast drift", check_map(&built.recursion.h1)));
            checks.push(Check::from("slow drift", check_map(&built.recursion.h2)));
            let field = built
                .averaged_field(config.di.as_ref().and_then(|d| d.y.as_deref()))
                .map_err(|e| Error::InvalidInput(format!("{e:#}")));
            checks.push(Check::from("averaged field", field.and_then(|f| check_field(&f))));
            if let Some(p) = &built.saddle {
                checks.push(Check::from("stationary law", saddle_law(p)));
            }
        }
        Err(e) => checks.push(Check {
            name: "problem",
            passed: false,
            detail: format!("{e:#}"),
        }),
    }
    if let Some(run) = &config.run {
        let horizon = steps.unwrap_or(run.steps).max(2);
        checks.push(Check::from(
            "schedule",
            validate_schedule(&run.schedule, horizon).map(|r| {
                let detail = format!(
                    "final b/a {:.3e}, square sums {:.4} ≤ {:.4} and {:.4} ≤ {:.4}",
                    r.final_ratio, r.a_square_sum, r.a_square_bound, r.b_square_sum, r.b_square_bound
                );
                (r.passed(), detail)
            }),
        ));
    }
    let mut report = String::new();
    for c in &checks {
        let line = format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        println!("{line}");
        report.push_str(&line);
        report.push('\n');
    }
    let passed = checks.iter().all(|c| c.passed);
    fs::write(loaded.out.join("validation.txt"), report).or_status(Status::Io)?;
    let m = manifest(
        "validate",
        &loaded,
        if passed { "ok" } else { "invalid" },
        json!({ "files": ["validation.txt"] }),
    );
    write_json(&loaded.out.join("manifest.json"), &m).or_status(Status::Io)?;
    Ok(if passed { Status::Ok } else { Status::Invalid })
}

fn saddle_law(p: &SaddleProblem) -> tsinc::Result<(bool, String)> {
    let mu = p.stationary_law()?;
    Ok((true, format!("unique, {mu:?}; coercivity level {:.4}", p.coercivity_level())))
}

fn diagnostics(built: &Built, traj: &Trajectory, spec: &DiagnosticsSpec) -> tsinc::Result<Vec<DiagnosticRow>> {
    let Ok(gaps) = interpolation_gap(traj, spec.window) else {
        return Ok(Vec::new());
    };
    let end = *traj.t_slow.last().expect("trajectories are nonempty");
    let mut rows = Vec::with_capacity(gaps.len());
    for (i, g) in gaps.iter().enumerate() {
        let apt_metric = match &built.slow_field {
            Some(field) if g.start_time + spec.apt_window <= end => Some(
                apt_profile(traj, field, &[g.start_time], spec.apt_window, spec.apt_terms, spec.dt)?[0],
            ),
            _ => None,
        };
        let dist_to_lambda = match &built.saddle {
            Some(p) => {
                let x = traj.x.get(g.start);
                Some((&x - lambda_min_from(p, &traj.y.get(g.start), &x)?).norm())
            }
            None => None,
        };
        rows.push(DiagnosticRow {
            window: i,
            interpolation_gap: g.gap,
            apt_metric,
            dist_to_lambda,
        });
    }
    Ok(rows)
}

fn tail(traj: &Trajectory, fraction: f64) -> std::ops::Range<usize> {
    let knots = traj.steps() + 1;
    let len = ((knots as f64 * fraction).ceil() as usize).clamp(1, knots);
    knots - len..knots
}

/// Writes the outputs of one replica and returns its manifest fragment.
fn write_replica(built: &Built, traj: &Trajectory, spec: &DiagnosticsSpec, dir: &Path) -> std::result::Result<Value, Failure> {
    create_dir(dir).or_status(Status::Io)?;
    write_csv(&dir.join("trajectory.csv"), |w| traj.write_csv(w)).or_status(Status::Io)?;
    let rows = diagnostics(built, traj, spec).map_err(core_failure)?;
    write_csv(&dir.join("diagnostics.csv"), |w| write_diagnostics_csv(&rows, w)).or_status(Status::Io)?;

    let window = tail(traj, spec.tail_fraction);
    let measure = occupation(traj, window.clone()).map_err(core_failure)?;
    let alphabet = built.recursion.h2.alphabet_size();
    let marginal = measure.s_marginal(alphabet);
    write_csv(&dir.join("occupation.csv"), |w| {
        use std::io::Write;
        writeln!(w, "s,mass")?;
        for (s, m) in marginal.iter().enumerate() {
            writeln!(w, "{s},{m:.16e}")?;
        }
        Ok(())
    })
    .or_status(Status::Io)?;

    let mut extra = json!({
        "steps": traj.steps(),
        "final_x": traj.final_x().as_slice(),
        "final_y": traj.final_y().as_slice(),
        "files": ["trajectory.csv", "diagnostics.csv", "occupation.csv"],
    });
    if let Some(p) = &built.saddle {
        let (_, y_bar) = tail_means(traj, window);
        let center = lambda_min(p, &y_bar).map_err(core_failure)?;
        let law = p.stationary_law().map_err(core_failure)?;
        extra["occupation"] = json!({
            "s_total_variation": measure.s_total_variation(law),
            "mass_within_0.05_of_lambda": measure.mass_within(&center, 0.05),
        });
    }
    Ok(extra)
}

fn optimality_json(p: &SaddleProblem, trajs: &[&Trajectory], fraction: f64) -> tsinc::Result<Value> {
    let mut x = Point::zeros(p.d1());
    let mut y = Point::zeros(p.d2());
    for t in trajs {
        let (xb, yb) = tail_means(t, tail(t, fraction));
        x += xb;
        y += yb;
    }
    x /= trajs.len() as f64;
    y /= trajs.len() as f64;
    let r = optimality_at(p, &x, &y)?;
    Ok(json!({
        "replicas": trajs.len(),
        "tail_fraction": fraction,
        "x_bar": r.x_bar.as_slice(),
        "y_bar": r.y_bar.as_slice(),
        "feasibility_gap": r.feasibility_gap,
        "primal_dual_gap": r.primal_dual_gap,
        "lambda_distance": r.lambda_distance,
        "eps_surplus": r.eps_surplus,
    }))
}

pub fn run(args: &RunArgs, saddle_only: bool) -> Outcome {
    let loaded = load(&args.common)?;
    let config = &loaded.config;
    let command = if saddle_only { "saddle" } else { "run" };
    let built = config.problem.build().or_status(Status::Invalid)?;
    if saddle_only && built.saddle.is_none() {
        return Err(anyhow::anyhow!("config field `problem.kind`: the saddle command needs a saddle problem"))
            .or_status(Status::Invalid);
    }
    let run_config = config::require_run(config)
        .and_then(|r| r.to_config(args.seed, args.steps))
        .or_status(Status::Invalid)?;
    if args.replicas == 0 {
        return Err(anyhow::anyhow!("--replicas must be at least 1")).or_status(Status::Invalid);
    }
    let init = config::initial_state(config.init.as_ref(), built.d1(), built.d2()).or_status(Status::Invalid)?;
    let seeds: Vec<u64> = (0..args.replicas as u64).map(|i| run_config.seed.wrapping_add(i)).collect();
    let results = run_replicas(&built.recursion, &init, &run_config, &seeds);

    let mut status = Status::Ok;
    let mut replicas = Vec::new();
    let mut finished = Vec::new();
    for (i, (seed, result)) in seeds.iter().zip(&results).enumerate() {
        let dir = if args.replicas == 1 {
            loaded.out.clone()
        } else {
            loaded.out.join(format!("replica_{i}"))
        };
        let mut entry = match result {
            Ok(traj) => {
                finished.push(traj);
                let mut e = write_replica(&built, traj, &config.diagnostics, &dir)?;
                e["status"] = json!("ok");
                e
            }
            Err(Error::Divergence { step }) => {
                create_dir(&dir).or_status(Status::Io)?;
                eprintln!("replica {i} (seed {seed}) diverged at step {step}");
                status = Status::Diverged;
                json!({ "status": "diverged", "divergence_step": step })
            }
            Err(e) => return Err(core_failure(e.clone())),
        };
        entry["seed"] = json!(seed);
        if args.replicas > 1 {
            entry["dir"] = json!(format!("replica_{i}"));
            let m = manifest(command, &loaded, entry["status"].as_str().unwrap_or("ok"), entry.clone());
            write_json(&dir.join("manifest.json"), &m).or_status(Status::Io)?;
        }
        replicas.push(entry);
    }

    let mut extra = json!({ "steps": run_config.steps, "seed": run_config.seed, "schedule": run_config.schedule });
    if let (Some(p), false) = (&built.saddle, finished.is_empty()) {
        let report = optimality_json(p, &finished, config.diagnostics.tail_fraction).map_err(core_failure)?;
        write_json(&loaded.out.join("optimality.json"), &report).or_status(Status::Io)?;
        println!("{}", serde_json::to_string_pretty(&report).expect("JSON values serialize"));
        extra["optimality"] = report;
    }
    if args.replicas == 1 {
        let single = replicas.pop().expect("one replica");
        if let (Value::Object(e), Value::Object(s)) = (&mut extra, single) {
            e.extend(s);
        }
    } else {
        extra["replicas"] = Value::Array(replicas);
    }
    let label = if status == Status::Ok { "ok" } else { "diverged" };
    write_json(&loaded.out.join("manifest.json"), &manifest(command, &loaded, label, extra)).or_status(Status::Io)?;
    Ok(status)
}

pub fn solve_di(common: &CommonArgs, envelope: bool) -> Outcome {
    let loaded = load(common)?;
    let config = &loaded.config;
    let built = config.problem.build().or_status(Status::Invalid)?;
    let di = config
        .di
        .as_ref()
        .ok_or_else(|| anyhow::anyhow!("config field `di`: missing (required by solve-di)"))
        .or_status(Status::Invalid)?;
    let field = built.averaged_field(di.y.as_deref()).or_status(Status::Invalid)?;
    if di.z0.len() != field.dim() {
        return Err(anyhow::anyhow!(
            "config field `di.z0`: expected {} entries, found {}",
            field.dim(),
            di.z0.len()
        ))
        .or_status(Status::Invalid);
    }
    let saddle = match (envelope, &built.saddle) {
        (true, None) => {
            return Err(anyhow::anyhow!("--envelope needs a saddle problem")).or_status(Status::Invalid);
        }
        (_, p) => p.as_ref().filter(|_| envelope),
    };
    let z0 = Point::from_row_slice(&di.z0);
    let mut files = vec!["di_path.csv"];
    let mut extra = json!({ "horizon": di.horizon, "dt": di.dt });
    let path = match di_solve(&field, &z0, di.horizon, di.dt, &di.selection.to_selection()) {
        Ok(path) => path,
        Err(Error::Divergence { step }) => {
            extra["divergence_step"] = json!(step);
            write_json(&loaded.out.join("manifest.json"), &manifest("solve-di", &loaded, "diverged", extra))
                .or_status(Status::Io)?;
            return Err(core_failure(Error::Divergence { step }));
        }
        Err(e) => return Err(core_failure(e)),
    };
    write_csv(&loaded.out.join("di_path.csv"), |w| path.write_csv(w)).or_status(Status::Io)?;
    extra["final_state"] = json!(path.final_state().as_slice());
    if let Some(p) = saddle {
        let report = verify_envelope(p, &path).map_err(core_failure)?;
        write_csv(&loaded.out.join("envelope.csv"), |w| {
            use std::io::Write;
            writeln!(w, "t,value,integral,discrepancy")?;
            for ((t, v), i) in path.times.iter().zip(&report.values).zip(&report.integrals) {
                let d = v - report.values[0] - i;
                writeln!(w, "{t:.16e},{v:.16e},{i:.16e},{d:.16e}")?;
            }
            Ok(())
        })
        .or_status(Status::Io)?;
        files.push("envelope.csv");
        println!(
            "envelope: max discrepancy {:.3e}, nondecreasing {}",
            report.max_discrepancy, report.nondecreasing
        );
        extra["envelope"] = json!({
            "max_discrepancy": report.max_discrepancy,
            "min_increment": report.min_increment,
            "nondecreasing": report.nondecreasing,
        });
    }
    extra["files"] = json!(files);
    write_json(&loaded.out.join("manifest.json"), &manifest("solve-di", &loaded, "ok", extra)).or_status(Status::Io)?;
    Ok(Status::Ok)
}
