use std::fmt;
use std::fs;
use std::path::Path;
use std::time::Instant;

use manifold_pmp::fixtures;
use manifold_pmp::geometry::ManifoldModel;
use manifold_pmp::needle::{sweep_csv, NeedleConfig, NeedleLab};
use manifold_pmp::par::Execution;
use manifold_pmp::pmp::{PmpContext, SearchOptions};
use manifold_pmp::problem::{load_direction, load_multiplier, load_problem_with_grid, ControlProblem, DirectionSpec, LoadedProblem, Multiplier};
use manifold_pmp::report::{BolzaSection, GeometrySection, IntegralSection, NeedleSection, PmpSection, PointwiseSection, Report};
use manifold_pmp::second_order::{
    direction_bundle, pointwise_ingredients, quasi_pointwise_lhs, second_order_integral_lhs, BolzaContext, SecondOrderError, Verdict, TOL_SO,
};
use manifold_pmp::selftest::geometry_selftest;
use manifold_pmp::trajectory::{ReferenceData, Trajectory};

use crate::Common;

/// Minimum log-log slope of the first-order needle defect.
const NEEDLE_MIN_SLOPE: f64 = 1.9;

#[derive(Debug)]
pub struct CliError(String);

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

fn err(module: &str, e: impl fmt::Display) -> CliError {
    CliError(format!("{module}: {e}"))
}

/// Reads a file, or a bundled fixture for `@name`.
fn read_source(path: &str) -> Result<String, CliError> {
    if let Some(name) = path.strip_prefix('@') {
        return fixtures::by_name(name)
            .map(str::to_owned)
            .ok_or_else(|| err("cli", format!("unknown bundled fixture '{name}'")));
    }
    fs::read_to_string(path).map_err(|e| err("problem-model", format!("cannot read '{path}': {e}")))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| err("cli", format!("cannot write '{}': {e}", path.display())))
}

struct Inputs {
    label: String,
    problem: LoadedProblem,
}

fn load(args: &Common) -> Result<Inputs, CliError> {
    let path = args.problem.as_deref().ok_or_else(|| err("cli", "--problem is required"))?;
    let src = read_source(path)?;
    let problem = load_problem_with_grid(&src, args.grid).map_err(|e| err("problem-model", format!("{path}: {e}")))?;
    Ok(Inputs { label: path.to_string(), problem })
}

fn direction(args: &Common, p: &ControlProblem) -> Result<DirectionSpec, CliError> {
    let path = args.direction.as_deref().ok_or_else(|| err("cli", "--direction is required"))?;
    load_direction(&read_source(path)?, p).map_err(|e| err("problem-model", format!("{path}: {e}")))
}

fn supplied_multiplier(args: &Common, p: &ControlProblem) -> Result<Option<Multiplier>, CliError> {
    match args.multiplier.as_deref() {
        None => Ok(None),
        Some(path) => load_multiplier(&read_source(path)?, p)
            .map(Some)
            .map_err(|e| err("problem-model", format!("{path}: {e}"))),
    }
}

/// The supplied multiplier, or every ray the search finds.
fn candidates(args: &Common, ctx: &PmpContext, exec: Execution) -> Result<Vec<Multiplier>, CliError> {
    if let Some(m) = supplied_multiplier(args, ctx.problem)? {
        return Ok(vec![m]);
    }
    let search = ctx.find_multipliers(&SearchOptions::default(), exec);
    if search.found.is_empty() {
        return Err(err("pmp-checker", "no multiplier found at this resolution; pass --multiplier"));
    }
    Ok(search.found.into_iter().map(|(m, _)| m).collect())
}

fn trajectory_csv(traj: &Trajectory, n: usize, m: usize) -> String {
    let mut out = String::from("t");
    (1..=n).for_each(|i| out.push_str(&format!(",x{i}")));
    (1..=m).for_each(|i| out.push_str(&format!(",u{i}")));
    out.push('\n');
    for row in traj.csv_rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

fn reference(p: &ControlProblem, exec: Execution) -> Result<ReferenceData, CliError> {
    ReferenceData::from_problem(p, exec).map_err(|e| err("trajectory-engine", e))
}

fn check_pmp(args: &Common, inputs: &Inputs, exec: Execution) -> Result<PmpSection, CliError> {
    let run = |ctx: &PmpContext| -> Result<PmpSection, CliError> {
        if let Some(ell) = supplied_multiplier(args, ctx.problem)? {
            let rep = ctx.residuals(&ell, exec).map_err(|e| err("pmp-checker", e))?;
            return Ok(PmpSection {
                verdict: Verdict::from_bool(rep.verdicts.pass),
                source: "supplied".into(),
                candidates: 1,
                best_residual: None,
                message: None,
                multipliers: vec![rep],
            });
        }
        let search = ctx.find_multipliers(&SearchOptions::default(), exec);
        Ok(PmpSection {
            verdict: Verdict::from_bool(!search.found.is_empty()),
            source: "search".into(),
            candidates: search.candidates,
            best_residual: Some(search.best_residual),
            message: search.message,
            multipliers: search.found.into_iter().map(|(_, r)| r).collect(),
        })
    };
    let base = inputs.problem.base();
    let (section, rd) = match &inputs.problem {
        LoadedProblem::Mayer(p) => {
            let rd = reference(p, exec)?;
            let ctx = PmpContext::new(p, &rd).map_err(|e| err("pmp-checker", e))?;
            (run(&ctx)?, rd)
        }
        LoadedProblem::Bolza(b) => {
            let bc = BolzaContext::new(b, exec).map_err(|e| err("second-order", e))?;
            let ctx = bc.pmp().map_err(|e| err("pmp-checker", e))?;
            (run(&ctx)?, bc.reference.clone())
        }
    };
    if let Some(path) = &args.csv {
        write_file(path, &trajectory_csv(&rd.traj, base.n, base.m))?;
    }
    Ok(section)
}

fn check_integral(args: &Common, inputs: &Inputs, exec: Execution) -> Result<IntegralSection, CliError> {
    let tol = args.tol_so.unwrap_or(TOL_SO);
    let base = inputs.problem.base();
    let d = direction(args, base)?;
    let mut best: Option<IntegralSection> = None;
    let mut rejected = Vec::new();
    let mut keep = |s: IntegralSection| {
        if best.as_ref().is_none_or(|b| s.lhs < b.lhs) {
            best = Some(s);
        }
    };
    let total;
    match &inputs.problem {
        LoadedProblem::Mayer(p) => {
            let rd = reference(p, exec)?;
            let ctx = PmpContext::new(p, &rd).map_err(|e| err("pmp-checker", e))?;
            let bundle = direction_bundle(p, &rd, &d.control, &d.v, exec);
            if !bundle.critical {
                return Err(err(
                    "variations",
                    format!("direction is not critical (residual {:.3e})", bundle.criticality_residual()),
                ));
            }
            let cands = candidates(args, &ctx, exec)?;
            total = cands.len();
            for ell in &cands {
                match second_order_integral_lhs(&ctx, ell, &bundle, exec) {
                    Ok(r) => keep(IntegralSection::from_report(&r, bundle.criticality_residual())),
                    Err(e @ SecondOrderError::SignPattern { .. }) => rejected.push(e.to_string()),
                    Err(e) => return Err(err("second-order", e)),
                }
            }
        }
        LoadedProblem::Bolza(b) => {
            let bc = BolzaContext::new(b, exec).map_err(|e| err("second-order", e))?;
            let ctx = bc.pmp().map_err(|e| err("pmp-checker", e))?;
            let cands = candidates(args, &ctx, exec)?;
            total = cands.len();
            for ell in &cands {
                match bc.second_order_lhs(ell, &d.control, &d.v, exec) {
                    Ok(r) => {
                        let rows = r.feasibility.boundary_rows.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                        let mut s = IntegralSection::from_report(&r.direct, rows.max(r.feasibility.cost_variation.max(0.0)));
                        s.bolza = Some(BolzaSection {
                            mayer_lhs: r.mayer.lhs,
                            route_gap: r.route_gap,
                            feasibility: r.feasibility,
                        });
                        keep(s);
                    }
                    Err(e @ SecondOrderError::SignPattern { .. }) => rejected.push(e.to_string()),
                    Err(e) => return Err(err("second-order", e)),
                }
            }
        }
    }
    let mut s = best.ok_or_else(|| err("second-order", format!("no candidate multiplier is admissible: {}", rejected.join("; "))))?;
    s.candidates = total;
    s.tolerance = tol;
    s.verdict = Verdict::from_lhs(s.lhs, tol);
    Ok(s)
}

fn check_pointwise(args: &Common, inputs: &Inputs, exec: Execution) -> Result<PointwiseSection, CliError> {
    let tol = args.tol_so.unwrap_or(TOL_SO);
    let p = match &inputs.problem {
        LoadedProblem::Mayer(p) => p,
        LoadedProblem::Bolza(_) => return Err(err("second-order", "the quasi-pointwise test needs a problem without running cost")),
    };
    let d = direction(args, p)?;
    let spec = d.pointwise.clone().ok_or_else(|| err("problem-model", "direction file has no [pointwise] table"))?;
    let rd = reference(p, exec)?;
    let ctx = PmpContext::new(p, &rd).map_err(|e| err("pmp-checker", e))?;
    let mut best: Option<PointwiseSection> = None;
    for ell in candidates(args, &ctx, exec)? {
        let data = pointwise_ingredients(&ctx, &ell, &spec, Some(&d.control), exec).map_err(|e| err("second-order", e))?;
        let r = quasi_pointwise_lhs(&data);
        let applicable = data.hypotheses.failed.is_empty();
        let s = PointwiseSection {
            verdict: Verdict::from_bool(!applicable || r.lhs <= tol),
            applicable,
            lhs: r.lhs,
            tolerance: tol,
            terms: r.terms,
            multiplier: ell,
            taus: data.taus.clone(),
            betas: data.betas.clone(),
            r: data.r.clone(),
            nodes: data.nodes.clone(),
            hypotheses: data.hypotheses.clone(),
        };
        let better = match &best {
            None => true,
            Some(b) => (s.verdict.passed() && !b.verdict.passed()) || (s.verdict == b.verdict && s.lhs < b.lhs),
        };
        if better {
            best = Some(s);
        }
    }
    best.ok_or_else(|| err("pmp-checker", "no multiplier"))
}

fn verify_needle(args: &Common, inputs: &Inputs, exec: Execution) -> Result<NeedleSection, CliError> {
    let p = match &inputs.problem {
        LoadedProblem::Mayer(p) => p,
        LoadedProblem::Bolza(_) => return Err(err("needle-lab", "needle sweeps run on problems without running cost")),
    };
    let d = direction(args, p)?;
    let mut cfg = NeedleConfig::from_direction(&d);
    if let Some(eps) = &args.eps {
        cfg.eps = eps.clone();
    }
    if let Some(r) = args.refine {
        cfg.refine = r;
    }
    let rd = reference(p, exec)?;
    let lab = NeedleLab::new(p, &rd, cfg, exec).map_err(|e| err("needle-lab", e))?;
    let samples = lab.sweep(exec).map_err(|e| err("needle-lab", e))?;
    let section = NeedleSection::evaluate(lab.fine_cells(), samples, NEEDLE_MIN_SLOPE);
    if let Some(path) = &args.csv {
        write_file(path, &sweep_csv(&section.samples))?;
    }
    Ok(section)
}

fn geometry(args: &Common, exec: Execution) -> Result<(GeometrySection, Option<String>), CliError> {
    let mut label = None;
    let models: Vec<ManifoldModel> = if !args.manifold.is_empty() {
        args.manifold
            .iter()
            .map(|n| ManifoldModel::builtin(n).ok_or_else(|| err("geometry-kernel", format!("unknown manifold '{n}'"))))
            .collect::<Result<_, _>>()?
    } else if args.problem.is_some() {
        let inputs = load(args)?;
        label = Some(inputs.label.clone());
        vec![inputs.problem.base().manifold.clone()]
    } else {
        vec![ManifoldModel::euclidean(3), ManifoldModel::sphere2(), ManifoldModel::halfplane2()]
    };
    let results = models
        .iter()
        .map(|m| geometry_selftest(m, args.samples, args.seed, exec).map_err(|e| err("geometry-kernel", format!("{}: {e}", m.name()))))
        .collect::<Result<Vec<_>, _>>()?;
    let verdict = Verdict::from_bool(results.iter().all(|r| r.pass));
    Ok((GeometrySection { verdict, results }, label))
}

pub fn run(command: &str, args: &Common) -> Result<Report, CliError> {
    let start = Instant::now();
    let exec = if args.sequential { Execution::Sequential } else { Execution::Parallel };
    let mut report = Report::new(command);
    if command == "geometry-selftest" {
        let (section, label) = geometry(args, exec)?;
        report.geometry = Some(section);
        report.problem = label;
    } else {
        let inputs = load(args)?;
        report.problem = Some(inputs.label.clone());
        report.grid_n = Some(inputs.problem.base().grid_n);
        match command {
            "check-pmp" => report.pmp = Some(check_pmp(args, &inputs, exec)?),
            "check-so-integral" => report.second_order = Some(check_integral(args, &inputs, exec)?),
            "check-so-pointwise" => report.pointwise = Some(check_pointwise(args, &inputs, exec)?),
            "verify-needle" => report.needle = Some(verify_needle(args, &inputs, exec)?),
            other => return Err(err("cli", format!("unknown command '{other}'"))),
        }
    }
    report.elapsed_seconds = start.elapsed().as_secs_f64();
    report.finish();
    if let Some(out) = &args.out {
        write_file(out, &report.to_json())?;
    }
    Ok(report)
}
