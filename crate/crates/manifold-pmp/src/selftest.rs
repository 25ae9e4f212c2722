//! Randomized identity checks for a manifold model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::geometry::{ChartPoint, CurveSample, GeometryError, ManifoldModel, TangentVector};
use crate::par::Execution;

pub const TOL_TRANSPORT: f64 = 1e-6;
pub const TOL_ROUND_TRIP: f64 = 1e-8;
pub const TOL_CURVATURE: f64 = 1e-6;
pub const TOL_SECTIONAL: f64 = 1e-4;

/// Pieces used to sample each geodesic before transporting along it.
const CURVE_PIECES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentityCheck {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SelfTestReport {
    pub manifold: String,
    pub samples: usize,
    pub seed: u64,
    pub checks: Vec<IdentityCheck>,
    /// Sectional curvature range seen, reported for every model.
    pub sectional_range: [f64; 2],
    pub pass: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct SampleErrors {
    transport: f64,
    round_trip: f64,
    antisymmetry: f64,
    bianchi: f64,
    sectional: f64,
}

/// Known constant sectional curvature of the builtin models.
pub fn constant_curvature(model: &ManifoldModel) -> Option<f64> {
    match model.name() {
        "sphere2" => Some(1.0),
        "halfplane2" => Some(-1.0),
        n if n.starts_with("euclidean:") => Some(0.0),
        _ => None,
    }
}

/// Box inside the chart domain where samples are drawn: the domain clipped to
/// [-2, 2] per coordinate, then shrunk by a fifth of its width on each side.
pub fn sampling_box(model: &ManifoldModel) -> (Vec<f64>, Vec<f64>) {
    let d = &model.domain;
    let mut lo = Vec::with_capacity(model.dim());
    let mut hi = Vec::with_capacity(model.dim());
    for (a, b) in d.lo.iter().zip(&d.hi) {
        let a = a.max(-2.0);
        let b = b.min(2.0);
        let w = b - a;
        lo.push(a + 0.2 * w);
        hi.push(b - 0.2 * w);
    }
    (lo, hi)
}

fn random_point(rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter().zip(hi).map(|(a, b)| rng.gen_range(*a..=*b)).collect()
}

fn random_unit(model: &ManifoldModel, rng: &mut ChaCha8Rng, x: &[f64]) -> Result<Vec<f64>, GeometryError> {
    loop {
        let v: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = model.norm(x, &v)?;
        if n > 1e-3 {
            return Ok(v.iter().map(|c| c / n).collect());
        }
    }
}

fn geodesic_curve(model: &ManifoldModel, x: &ChartPoint, v: &TangentVector) -> Result<CurveSample, GeometryError> {
    let mut c = CurveSample {
        times: vec![0.0],
        points: vec![x.clone()],
        velocities: vec![v.clone()],
    };
    let ds = 1.0 / CURVE_PIECES as f64;
    for k in 1..=CURVE_PIECES {
        let end = model.integrate_geodesic(c.points.last().unwrap(), c.velocities.last().unwrap(), ds)?;
        c.times.push(k as f64 * ds);
        c.points.push(end.point);
        c.velocities.push(end.velocity);
    }
    Ok(c)
}

fn one_sample(model: &ManifoldModel, seed: u64, lo: &[f64], hi: &[f64]) -> Result<SampleErrors, GeometryError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = model.dim();
    let xs = random_point(&mut rng, lo, hi);
    let x = ChartPoint::new(xs.clone());
    let tv = |c: Vec<f64>| TangentVector::new(x.clone(), c);
    let mut e = SampleErrors::default();

    // Transport along a short geodesic preserves inner products.
    let len = rng.gen_range(0.05..0.3);
    let dir = random_unit(model, &mut rng, &xs)?;
    let v = tv(dir.iter().map(|c| c * len).collect());
    let curve = geodesic_curve(model, &x, &v)?;
    let a = random_unit(model, &mut rng, &xs)?;
    let b = random_unit(model, &mut rng, &xs)?;
    let ta = model.parallel_transport(&curve, &tv(a.clone()))?;
    let tb = model.parallel_transport(&curve, &tv(b.clone()))?;
    let ys = curve.points.last().unwrap().coords.as_slice().to_vec();
    for (p, q, pt, qt) in [(&a, &a, &ta, &ta), (&a, &b, &ta, &tb), (&b, &b, &tb, &tb)] {
        let before = model.inner(&xs, p, q)?;
        let after = model.inner(&ys, pt.comps.as_slice(), qt.comps.as_slice())?;
        e.transport = e.transport.max((before - after).abs());
    }

    // exp ∘ log on a nearby point.
    let y = model.exp_map(&x, &v)?;
    let w = model.log_map(&x, &y)?;
    let z = model.exp_map(&x, &w)?;
    let gap: Vec<f64> = (&z.coords - &y.coords).iter().copied().collect();
    e.round_trip = model.norm(y.coords.as_slice(), &gap)?;

    // Curvature symmetries with metric-unit arguments.
    let r = model.riemann_at(&xs)?;
    let u: Vec<Vec<f64>> = (0..4).map(|_| random_unit(model, &mut rng, &xs)).collect::<Result<_, _>>()?;
    let (p, q, s, t) = (&u[0], &u[1], &u[2], &u[3]);
    let rv = r.eval(p, q, s, t);
    e.antisymmetry = (rv + r.eval(q, p, s, t))
        .abs()
        .max((rv + r.eval(p, q, t, s)).abs())
        .max((rv - r.eval(s, t, p, q)).abs());
    e.bianchi = (rv + r.eval(q, s, p, t) + r.eval(s, p, q, t)).abs();

    if n >= 2 {
        let gpp = model.inner(&xs, p, p)?;
        let gqq = model.inner(&xs, q, q)?;
        let gpq = model.inner(&xs, p, q)?;
        let area = gpp * gqq - gpq * gpq;
        e.sectional = if area > 1e-6 { r.eval(p, q, q, p) / area } else { f64::NAN };
    } else {
        e.sectional = 0.0;
    }
    Ok(e)
}

fn check(name: &str, max_error: f64, tolerance: f64) -> IdentityCheck {
    IdentityCheck {
        name: name.into(),
        max_error,
        tolerance,
        pass: max_error < tolerance,
    }
}

/// Runs `samples` randomized checks; sample i uses seed `seed + i`.
pub fn geometry_selftest(model: &ManifoldModel, samples: usize, seed: u64, exec: Execution) -> Result<SelfTestReport, GeometryError> {
    let (lo, hi) = sampling_box(model);
    let all = exec.try_map_range(samples, |i| one_sample(model, seed.wrapping_add(i as u64), &lo, &hi))?;
    let max = |f: fn(&SampleErrors) -> f64| all.iter().map(f).fold(0.0, f64::max);
    let mut checks = vec![
        check("transport_isometry", max(|e| e.transport), TOL_TRANSPORT),
        check("exp_log_round_trip", max(|e| e.round_trip), TOL_ROUND_TRIP),
        check("curvature_antisymmetry", max(|e| e.antisymmetry), TOL_CURVATURE),
        check("first_bianchi", max(|e| e.bianchi), TOL_CURVATURE),
    ];
    let ks: Vec<f64> = all.iter().map(|e| e.sectional).filter(|k| k.is_finite()).collect();
    let range = if ks.is_empty() {
        [0.0, 0.0]
    } else {
        [ks.iter().copied().fold(f64::INFINITY, f64::min), ks.iter().copied().fold(f64::NEG_INFINITY, f64::max)]
    };
    if let Some(k0) = constant_curvature(model) {
        let err = ks.iter().map(|k| (k - k0).abs()).fold(0.0, f64::max);
        checks.push(check("sectional_curvature", err, TOL_SECTIONAL));
    }
    let pass = checks.iter().all(|c| c.pass);
    Ok(SelfTestReport {
        manifold: model.name().to_string(),
        samples,
        seed,
        checks,
        sectional_range: range,
        pass,
    })
}
