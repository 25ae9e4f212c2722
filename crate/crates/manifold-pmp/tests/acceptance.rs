mod common;

use std::time::Instant;

use manifold_pmp::fixtures;
use manifold_pmp::geometry::ManifoldModel;
use manifold_pmp::liapounoff::{select_subset, CellVectors};
use manifold_pmp::needle::{NeedleConfig, NeedleLab};
use manifold_pmp::par::Execution;
use manifold_pmp::pmp::{find_multipliers, solve_adjoint, PmpContext};
use manifold_pmp::problem::{load_problem, ControlSignal, Multiplier};
use manifold_pmp::report::NeedleSection;
use manifold_pmp::second_order::{
    direction_bundle, pointwise_ingredients, quasi_pointwise_lhs, second_order_integral_lhs, BolzaContext, SecondOrderError,
};
use manifold_pmp::selftest::geometry_selftest;
use manifold_pmp::trajectory::{geodesic_residual, ReferenceData, STATIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EXEC: Execution = Execution::Parallel;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

/// Warga along x̄ = 0 by hand: X₁ ≡ 0 and X₂ = ∫u₂, so half the second
/// variation is −∫(u₁ + u₂)X₂ dt. Midpoint rule on a fine grid.
fn warga_hand_value(u: impl Fn(f64) -> [f64; 2], steps: usize) -> f64 {
    let h = 1.0 / steps as f64;
    let mut x2 = 0.0;
    let mut total = 0.0;
    for k in 0..steps {
        let t = (k as f64 + 0.5) * h;
        let [u1, u2] = u(t);
        let mid = x2 + 0.5 * h * u2;
        total -= (u1 + u2) * mid * h;
        x2 += h * u2;
    }
    total
}

fn switching(t: f64) -> [f64; 2] {
    if t < 0.5 {
        [1.0, -1.0]
    } else {
        [1.0, 1.0]
    }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let p = fixtures::warga();
    let d = fixtures::warga_direction(&p);
    let ell = fixtures::warga_multiplier(&p);
    let rd = ReferenceData::from_problem(&p, EXEC).unwrap();
    let ctx = PmpContext::new(&p, &rd).unwrap();
    let bundle = direction_bundle(&p, &rd, &d.control, &d.v, EXEC);
    let r = second_order_integral_lhs(&ctx, &ell, &bundle, EXEC).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let hand = warga_hand_value(switching, 1 << 16);
    let pass = (r.lhs - 0.25).abs() < 1e-3 && (hand - 0.25).abs() < 1e-6 && !r.verdict.passed() && secs < 5.0 && p.grid_n == 1024;
    outcome(pass, format!("lhs = {:.9}, hand = {:.9}, verdict = {:?}, {:.2} s", r.lhs, hand, r.verdict, secs))
}

fn criterion_2() -> Outcome {
    let p = fixtures::warga();
    let rd = ReferenceData::from_problem(&p, EXEC).unwrap();
    let search = find_multipliers(&p, &rd, EXEC).unwrap();
    if search.found.len() != 1 {
        return outcome(false, format!("{} rays found", search.found.len()));
    }
    let ell = &search.found[0].0;
    let flat = ell.flat();
    let scale = -1.0 / flat[0];
    let normalized: Vec<f64> = flat.iter().map(|v| v * scale).collect();
    let expected = [-1.0, 1.0, 0.0, 0.0];
    let ell_err = normalized.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let costate = solve_adjoint(&p, &rd, &Multiplier::from_flat(&normalized, 1)).unwrap();
    let mut p_err: f64 = 0.0;
    for i in 0..rd.cells() {
        for s in STATIONS {
            let pv = costate.at(i, s);
            p_err = p_err.max((pv[0] + 1.0).abs()).max(pv[1].abs());
        }
    }
    outcome(
        ell_err < 1e-4 && p_err < 1e-6 && scale > 0.0,
        format!("one ray, normalized l = {normalized:.6?}, |l - l*| = {ell_err:.2e}, sup |p - (-1,0)| = {p_err:.2e}"),
    )
}

fn criterion_3() -> Outcome {
    let mut worst_gap: f64 = 0.0;
    let mut curvature_nonzero = 0;
    let mut lines = Vec::new();

    let mut check = |name: &str, lib: f64, curvature: f64, oracle: f64| {
        worst_gap = worst_gap.max((lib - oracle).abs());
        if curvature != 0.0 {
            curvature_nonzero += 1;
        }
        lines.push(format!("{name}: {lib:.9} vs {oracle:.9}"));
    };

    // Warga.
    let p = fixtures::warga();
    let d = fixtures::warga_direction(&p);
    let ell = fixtures::warga_multiplier(&p);
    let rd = ReferenceData::from_problem(&p, EXEC).unwrap();
    let ctx = PmpContext::new(&p, &rd).unwrap();
    let r = second_order_integral_lhs(&ctx, &ell, &direction_bundle(&p, &rd, &d.control, &d.v, EXEC), EXEC).unwrap();
    let cells = 64;
    let ubar = vec![vec![0.0, 0.0]; cells];
    let u: Vec<Vec<f64>> = (0..cells).map(|i| switching((i as f64 + 0.5) / cells as f64).to_vec()).collect();
    let oracle = common::flat_second_variation(&common::warga_flat([-1.0, 1.0, 0.0, 0.0]), &[0.0, 0.0], 1.0, &ubar, &u, &[0.0, 0.0], 4);
    check("warga", r.lhs, r.terms.curvature, oracle);
    let spec = d.pointwise.clone().unwrap();
    let data = pointwise_ingredients(&ctx, &ell, &spec, Some(&d.control), EXEC).unwrap();
    let pointwise_curvature = quasi_pointwise_lhs(&data).terms.curvature;

    // Double integrator.
    let p = fixtures::flat_lq();
    let d = fixtures::flat_lq_direction(&p);
    let ell = fixtures::flat_lq_multiplier(&p);
    let rd = ReferenceData::from_problem(&p, EXEC).unwrap();
    let ctx = PmpContext::new(&p, &rd).unwrap();
    let r = second_order_integral_lhs(&ctx, &ell, &direction_bundle(&p, &rd, &d.control, &d.v, EXEC), EXEC).unwrap();
    let n = p.grid_n;
    let ubar = vec![vec![0.0]; n];
    let u: Vec<Vec<f64>> = (0..n).map(|i| d.control.values[i].clone()).collect();
    let oracle = common::flat_second_variation(&common::flat_lq_flat(-1.0), &[0.0, 0.0], 1.0, &ubar, &u, &[0.0, 0.0], 2);
    check("flat-lq", r.lhs, r.terms.curvature, oracle);

    // A nonlinear planar problem with a free initial point.
    let nl = common::Nonlinear { a: 0.4, b: 0.7, c: -0.3, s: 0.5 };
    let grid = 256;
    let p = load_problem(&nl.toml([0.3, -0.2], 0.5, grid)).unwrap().base().clone();
    let rd = ReferenceData::from_problem(&p, EXEC).unwrap();
    let ctx = PmpContext::new(&p, &rd).unwrap();
    let u = ControlSignal::from_fn(1.0, grid, |t| vec![if t < 0.4 { 1.5 } else if t < 0.7 { -0.8 } else { 0.1 }]);
    let v = [0.2, -0.4];
    let ell = Multiplier::new(vec![-1.0], vec![0.7, 0.6]);
    let r = second_order_integral_lhs(&ctx, &ell, &direction_bundle(&p, &rd, &u, &v, EXEC), EXEC).unwrap();
    let ubar = vec![vec![0.5]; grid];
    let uu: Vec<Vec<f64>> = (0..grid).map(|i| u.values[i].clone()).collect();
    let oracle = common::flat_second_variation(&nl.flat(0.7, 0.6), &[0.3, -0.2], 1.0, &ubar, &uu, &v, 2);
    check("nonlinear", r.lhs, r.terms.curvature, oracle);
    if pointwise_curvature != 0.0 {
        curvature_nonzero += 1;
    }

    outcome(
        worst_gap < 1e-6 && curvature_nonzero == 0,
        format!("max |lib - oracle| = {worst_gap:.2e}, nonzero curvature terms = {curvature_nonzero}; {}", lines.join("; ")),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for m in [ManifoldModel::euclidean(3), ManifoldModel::sphere2(), ManifoldModel::halfplane2()] {
        let r = geometry_selftest(&m, 500, 2024, EXEC).unwrap();
        pass &= r.pass;
        let worst: Vec<String> = r.checks.iter().map(|c| format!("{}={:.1e}", c.name, c.max_error)).collect();
        parts.push(format!("{} [{}]", r.manifold, worst.join(" ")));
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(pass && secs < 30.0, format!("{:.1} s; {}", secs, parts.join("; ")))
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let p = fixtures::warga();
    let d = fixtures::warga_direction(&p);
    let rd = ReferenceData::from_problem(&p, EXEC).unwrap();
    let lab = NeedleLab::new(&p, &rd, NeedleConfig::from_direction(&d), EXEC).unwrap();
    let samples = lab.sweep(EXEC).unwrap();
    let s = NeedleSection::evaluate(lab.fine_cells(), samples, 1.9);
    let slope = s.first_order.and_then(|o| o.slope());
    outcome(
        s.verdict.passed(),
        format!(
            "eps = {:?}, first-order slope = {:?}, second defect / eps^2 = [{}], {} needle cells, {:.1} s",
            s.samples.iter().map(|x| x.eps).collect::<Vec<_>>(),
            slope,
            s.second_ratios.iter().map(|r| format!("{r:.4e}")).collect::<Vec<_>>().join(", "),
            s.fine_cells,
            start.elapsed().as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let p = fixtures::warga();
    let d = fixtures::warga_direction(&p);
    let ell = fixtures::warga_multiplier(&p);
    let rd = ReferenceData::from_problem(&p, EXEC).unwrap();
    let ctx = PmpContext::new(&p, &rd).unwrap();
    let integral = second_order_integral_lhs(&ctx, &ell, &direction_bundle(&p, &rd, &d.control, &d.v, EXEC), EXEC).unwrap();
    let spec = d.pointwise.clone().unwrap();
    let data = pointwise_ingredients(&ctx, &ell, &spec, Some(&d.control), EXEC).unwrap();
    let qp = quasi_pointwise_lhs(&data);
    let h = &data.hypotheses;
    let residuals_reported = h.equal_set_residual.is_finite() && h.interior_margin.is_finite() && h.balance_residual.is_finite();
    outcome(
        qp.lhs > 0.0 && integral.lhs > 0.0 && residuals_reported,
        format!(
            "pointwise lhs = {:.6}, integral lhs = {:.6}; i) equal-set residual {:.1e}; ii) margin {:.3e} rank {}; iii) balance residual {:.1e}; failed = {:?}",
            qp.lhs, integral.lhs, h.equal_set_residual, h.interior_margin, h.interior_rank, h.balance_residual, h.failed
        ),
    )
}

fn criterion_7() -> Outcome {
    let b = fixtures::sphere_geodesic();
    let ell = fixtures::sphere_multiplier(&b);
    let bc = BolzaContext::new(&b, EXEC).unwrap();
    let geo = geodesic_residual(&b.base, &bc.reference.fd);
    let grid = b.base.grid_n;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_gap: f64 = 0.0;
    let mut errors = Vec::new();
    // Feasible directions: the split between the two copies of d/dθ changes
    // while the velocity stays on the reference.
    for _ in 0..20 {
        let pieces = rng.gen_range(2..12);
        let a: Vec<f64> = (0..pieces).map(|_| rng.gen_range(0.0..1.0)).collect();
        let u = ControlSignal::from_fn(1.0, grid, |t| {
            let k = ((t * pieces as f64) as usize).min(pieces - 1);
            vec![a[k], 0.0, 1.0 - a[k]]
        });
        match bc.second_order_lhs(&ell, &u, &[0.0, 0.0], EXEC) {
            Ok(r) => {
                worst = worst.max(r.direct.lhs).max(r.mayer.lhs);
                worst_gap = worst_gap.max(r.route_gap);
            }
            Err(e) => errors.push(e.to_string()),
        }
    }
    // A direction that moves the curve is not critical and must be rejected.
    let moving = ControlSignal::from_fn(1.0, grid, |t| vec![0.5, 0.3 * (if t < 0.5 { 1.0 } else { -1.0 }), 0.5]);
    let rejected = matches!(bc.second_order_lhs(&ell, &moving, &[0.0, 0.0], EXEC), Err(SecondOrderError::Infeasible(_)));
    outcome(
        geo < 1e-6 && errors.is_empty() && worst <= 1e-6 && worst_gap < 1e-6 && rejected,
        format!(
            "geodesic residual = {geo:.2e}; 20 directions: max lhs = {worst:.2e}, max route gap = {worst_gap:.2e}, errors = {errors:?}; moving direction rejected = {rejected}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_excess = f64::NEG_INFINITY;
    for _ in 0..40 {
        let dim = rng.gen_range(1..4);
        let rows: Vec<Vec<f64>> = (0..16).map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let count = rng.gen_range(1..16);
        let rho = count as f64 / 16.0;
        let w = 1.0 / 16.0;
        let sel = select_subset(&CellVectors::from_rows(&rows), rho, w);
        let best = common::brute_force_residual(&rows, rho, count, w);
        worst_excess = worst_excess.max(sel.residual - best);
    }
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for _ in 0..100 {
        let dim = rng.gen_range(1..4);
        let coarse = CellVectors::from_fn(64, dim, |_, row| row.iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0)));
        let fine = coarse.refined(2);
        let rho = rng.gen_range(1..64) as f64 / 64.0;
        let rc = select_subset(&coarse, rho, 1.0 / 64.0).residual;
        let rf = select_subset(&fine, rho, 1.0 / 128.0).residual;
        if rf > rc + 1e-12 {
            violations += 1;
        }
        if rc > 0.0 {
            worst_ratio = worst_ratio.max(rf / rc);
        }
    }
    outcome(
        worst_excess <= 1e-12 && violations == 0,
        format!("16-cell excess over optimum = {worst_excess:.1e}; refinement violations = {violations}/100 (max fine/coarse = {worst_ratio:.3})"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 warga second-order falsification", criterion_1),
        ("2 warga pmp structure", criterion_2),
        ("3 flat-space reduction", criterion_3),
        ("4 geometry identity suite", criterion_4),
        ("5 needle expansion orders", criterion_5),
        ("6 quasi-pointwise/integral coherence", criterion_6),
        ("7 geodesic sanity", criterion_7),
        ("8 liapounoff partition quality", criterion_8),
    ];
    let mut failed = Vec::new();
    for (name, f) in criteria {
        let o = f();
        println!("{} criterion {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(name);
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
