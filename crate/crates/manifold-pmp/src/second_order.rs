//! Second-order necessary conditions: the integral form (Mayer and Bolza) and
//! the quasi-pointwise form built from finitely many needle times.
//!
//! All left-hand sides are reported with Taylor normalisation, i.e. as the
//! ε²-coefficient of the endpoint expansion: ½[X·∇²H·X − R(p̃,X,f,X)] + ΔH·X
//! under the integral and ½ of the boundary Hessian form.

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem as Lp};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use thiserror::Error;

use crate::endpoint::EndpointJets;
use crate::expr::Expr;
use crate::geometry::Christoffel;
use crate::par::Execution;
use crate::pmp::{Costate, PmpContext, PmpError, TOL_H};
use crate::problem::{mayerize, BolzaProblem, ControlProblem, ControlSignal, Multiplier, PointwiseSpec, ProblemError, ReasonCode};
use crate::trajectory::{simpson, station_a_f, station_f, ReferenceData, Station, StationData, TrajectoryError, STATIONS};
use crate::variations::{bundle_from, curvature_drive, solve_linearized_with, DirectionData, VariationBundle, TOL, TOL_STRICT};

pub const TOL_SO: f64 = 1e-6;
pub const TOL_INT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

impl Verdict {
    pub fn from_lhs(lhs: f64, tol: f64) -> Self {
        if lhs <= tol {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn from_bool(ok: bool) -> Self {
        if ok {
            Verdict::Pass
        } else {
            Verdict::Fail
        }
    }

    pub fn passed(self) -> bool {
        self == Verdict::Pass
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SecondOrderError {
    #[error("multiplier entry ell_phi[{index}] = {value}: {reason}")]
    SignPattern { index: usize, value: f64, reason: String },
    #[error("direction is infeasible: {0}")]
    Infeasible(String),
    #[error("pointwise data: {0}")]
    Pointwise(String),
    #[error(transparent)]
    Pmp(#[from] PmpError),
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
}

impl From<ProblemError> for SecondOrderError {
    fn from(e: ProblemError) -> Self {
        SecondOrderError::Pmp(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct SecondOrderTerms {
    pub hessian: f64,
    pub cross: f64,
    pub curvature: f64,
    pub boundary: f64,
}

impl SecondOrderTerms {
    pub fn total(&self) -> f64 {
        self.hessian + self.cross + self.curvature + self.boundary
    }

    fn add(&mut self, o: &SecondOrderTerms) {
        self.hessian += o.hessian;
        self.cross += o.cross;
        self.curvature += o.curvature;
        self.boundary += o.boundary;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SecondOrderReport {
    pub lhs: f64,
    pub terms: SecondOrderTerms,
    pub multiplier: Multiplier,
    pub verdict: Verdict,
    pub tolerance: f64,
}

impl SecondOrderReport {
    fn new(terms: SecondOrderTerms, multiplier: &Multiplier) -> Self {
        let lhs = terms.total();
        Self {
            lhs,
            terms,
            multiplier: multiplier.clone(),
            verdict: Verdict::from_lhs(lhs, TOL_SO),
            tolerance: TOL_SO,
        }
    }
}

/// ℓ̂_i ≤ 0 and ℓ̂_i = 0 outside I₀″.
pub fn check_sign_pattern(ell: &Multiplier, i0_active: &[usize]) -> Result<(), SecondOrderError> {
    let scale = ell.norm().max(1e-300);
    for (i, v) in ell.ell_phi.iter().enumerate() {
        if *v > 0.0 {
            return Err(SecondOrderError::SignPattern {
                index: i,
                value: *v,
                reason: "must be non-positive".into(),
            });
        }
        if !i0_active.contains(&i) && v.abs() > 1e-12 * scale {
            return Err(SecondOrderError::SignPattern {
                index: i,
                value: *v,
                reason: "must vanish: index is strictly inactive along the direction".into(),
            });
        }
    }
    Ok(())
}

/// Framed covariant Hessian of a scalar field at a station.
fn scalar_hessian(e: &Expr, st: &StationData, u: &[f64]) -> DMatrix<f64> {
    let x = st.x.as_slice();
    let n = x.len();
    let h = e.hessian_state(x, u, st.t);
    let g = e.grad_state(x, u, st.t);
    let c: &Christoffel = &st.christoffel;
    let cov = DMatrix::from_fn(n, n, |a, b| h[a][b] - (0..n).map(|k| c.get(k, a, b) * g[k]).sum::<f64>());
    let m = st.e.transpose() * cov * &st.e;
    (&m + m.transpose()) * 0.5
}

fn scalar_grad(e: &Expr, st: &StationData, u: &[f64]) -> DVector<f64> {
    st.e.transpose() * DVector::from_vec(e.grad_state(st.x.as_slice(), u, st.t))
}

/// Integrand pieces at one station.
fn station_terms(
    st: &StationData,
    pv: &DVector<f64>,
    x: &DVector<f64>,
    da: &DMatrix<f64>,
    running: Option<(&Expr, f64, &[f64])>,
) -> [f64; 3] {
    let mut hess: f64 = (0..pv.len()).map(|k| pv[k] * x.dot(&(&st.b[k] * x))).sum::<f64>() * 0.5;
    let mut cross = pv.dot(&(da * x));
    if let Some((f0, l0, u)) = running {
        if l0 != 0.0 {
            hess += 0.5 * l0 * x.dot(&(scalar_hessian(f0, st, &st.u) * x));
            cross += l0 * (scalar_grad(f0, st, u) - scalar_grad(f0, st, &st.u)).dot(x);
        }
    }
    let curv = pv.dot(&curvature_drive(st, x));
    [hess, cross, curv]
}

fn integral_terms(
    ctx: &PmpContext,
    costate: &Costate,
    bundle: &VariationBundle,
    dd: &DirectionData,
    exec: Execution,
) -> SecondOrderTerms {
    let rd = ctx.reference;
    let h = rd.step();
    let l0 = costate.multiplier.ell_phi[0];
    let cells = exec.map_range(rd.cells(), |i| {
        let u = &bundle.control.values[i];
        let v = STATIONS.map(|s| {
            let st = rd.fd.station(i, s);
            station_terms(
                st,
                costate.at(i, s),
                bundle.x.station(i, s),
                dd.da(i, s),
                ctx.running.map(|f| (f, l0, u.as_slice())),
            )
        });
        SecondOrderTerms {
            hessian: simpson(h, v[0][0], v[1][0], v[2][0]),
            cross: simpson(h, v[0][1], v[1][1], v[2][1]),
            curvature: simpson(h, v[0][2], v[1][2], v[2][2]),
            boundary: 0.0,
        }
    });
    let mut t = SecondOrderTerms::default();
    for c in &cells {
        t.add(c);
    }
    t.boundary = 0.5 * ctx.lagrangian(&costate.multiplier).second(&bundle.v_frame(), &bundle.x_final());
    t
}

/// Integral second-order left-hand side for a multiplier and a solved direction.
pub fn second_order_integral_lhs(
    ctx: &PmpContext,
    ell: &Multiplier,
    bundle: &VariationBundle,
    exec: Execution,
) -> Result<SecondOrderReport, SecondOrderError> {
    ctx.validate(ell)?;
    check_sign_pattern(ell, &bundle.i0_active)?;
    let costate = ctx.solve_adjoint(ell)?;
    let dd = DirectionData::new(ctx.problem, ctx.reference, &bundle.control, exec);
    let terms = integral_terms(ctx, &costate, bundle, &dd, exec);
    Ok(SecondOrderReport::new(terms, ell))
}

/// Solves X for (u, V) in chart components and builds the bundle.
pub fn direction_bundle(p: &ControlProblem, rd: &ReferenceData, u: &ControlSignal, v: &[f64], exec: Execution) -> VariationBundle {
    let jets = EndpointJets::at_reference(p, rd);
    let dd = DirectionData::new(p, rd, u, exec);
    let vf = rd.frame_coords0(v);
    let x = solve_linearized_with(rd, &dd, &vf);
    bundle_from(&jets, u, vf, x)
}

/// Both references of a Bolza problem: on M and on ℝ × M after state augmentation.
#[derive(Debug, Clone)]
pub struct BolzaContext<'a> {
    pub problem: &'a BolzaProblem,
    pub reference: ReferenceData,
    pub mayer: ControlProblem,
    pub mayer_reference: ReferenceData,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BolzaFeasibility {
    /// ∫(∇f⁰(X) + f⁰(u) − f⁰(ū)) + ∇h(X(T)).
    pub cost_variation: f64,
    /// ∇ψ₁(V) and ∇ψ₂(X(T)).
    pub boundary_rows: Vec<f64>,
    pub strict: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BolzaSecondOrderReport {
    pub direct: SecondOrderReport,
    pub mayer: SecondOrderReport,
    pub route_gap: f64,
    pub feasibility: BolzaFeasibility,
}

impl<'a> BolzaContext<'a> {
    pub fn new(problem: &'a BolzaProblem, exec: Execution) -> Result<Self, SecondOrderError> {
        let reference = ReferenceData::from_problem(&problem.base, exec)?;
        let mayer = mayerize(problem);
        let mayer_reference = ReferenceData::from_problem(&mayer, exec)?;
        Ok(Self {
            problem,
            reference,
            mayer,
            mayer_reference,
        })
    }

    pub fn pmp(&self) -> Result<PmpContext<'_>, PmpError> {
        PmpContext::bolza(self.problem, &self.reference)
    }

    pub fn mayer_pmp(&self) -> Result<PmpContext<'_>, PmpError> {
        PmpContext::new(&self.mayer, &self.mayer_reference)
    }

    /// (ℓ₀, ℓ_ψ₁, ℓ_ψ₂) ↦ the augmented multiplier with ℓ_{x⁰(0)} = −ℓ₀.
    pub fn mayer_multiplier(ell: &Multiplier) -> Multiplier {
        let l0 = ell.ell_phi[0];
        let mut psi = vec![-l0];
        psi.extend(&ell.ell_psi);
        Multiplier::new(vec![l0], psi)
    }

    /// Direction feasibility for the Bolza test.
    pub fn feasibility(&self, bundle: &VariationBundle, dd: &DirectionData) -> BolzaFeasibility {
        let rd = &self.reference;
        let f0 = &self.problem.f0;
        let h = rd.step();
        let mut total = 0.0;
        for i in 0..rd.cells() {
            let u = &bundle.control.values[i];
            let v = STATIONS.map(|s| {
                let st = rd.fd.station(i, s);
                let x = bundle.x.station(i, s);
                scalar_grad(f0, st, &st.u).dot(x) + f0.eval(st.x.as_slice(), u, st.t) - f0.eval(st.x.as_slice(), &st.u, st.t)
            });
            total += simpson(h, v[0], v[1], v[2]);
        }
        let _ = dd;
        let cost_variation = total + bundle.g[0];
        BolzaFeasibility {
            cost_variation,
            boundary_rows: bundle.psi_rows.clone(),
            strict: cost_variation < -TOL_STRICT,
        }
    }

    /// Evaluates the Bolza second-order inequality directly and through the augmented problem.
    pub fn second_order_lhs(
        &self,
        ell: &Multiplier,
        u: &ControlSignal,
        v: &[f64],
        exec: Execution,
    ) -> Result<BolzaSecondOrderReport, SecondOrderError> {
        let base = &self.problem.base;
        let ctx = self.pmp()?;
        ctx.validate(ell)?;
        let dd = DirectionData::new(base, &self.reference, u, exec);
        let vf = self.reference.frame_coords0(v);
        let x = solve_linearized_with(&self.reference, &dd, &vf);
        let bundle = bundle_from(&ctx.jets, u, vf, x);
        let feas = self.feasibility(&bundle, &dd);
        if let Some(r) = feas.boundary_rows.iter().find(|r| r.abs() > TOL) {
            return Err(SecondOrderError::Infeasible(format!("boundary row {r:e} is not zero")));
        }
        if feas.cost_variation > TOL {
            return Err(SecondOrderError::Infeasible(format!(
                "first-order cost variation {:e} is positive",
                feas.cost_variation
            )));
        }
        let l0 = ell.ell_phi[0];
        if feas.strict && l0 != 0.0 {
            return Err(SecondOrderError::SignPattern {
                index: 0,
                value: l0,
                reason: "must vanish when the cost variation is strictly negative".into(),
            });
        }
        if l0 > 0.0 {
            return Err(SecondOrderError::SignPattern {
                index: 0,
                value: l0,
                reason: "must be non-positive".into(),
            });
        }
        let costate = ctx.solve_adjoint(ell)?;
        let direct = SecondOrderReport::new(integral_terms(&ctx, &costate, &bundle, &dd, exec), ell);

        let mctx = self.mayer_pmp()?;
        let mell = Self::mayer_multiplier(ell);
        let mut mv = vec![0.0];
        mv.extend(v);
        let mbundle = direction_bundle(&self.mayer, &self.mayer_reference, u, &mv, exec);
        let mayer = second_order_integral_lhs(&mctx, &mell, &mbundle, exec)?;
        Ok(BolzaSecondOrderReport {
            route_gap: (direct.lhs - mayer.lhs).abs(),
            direct,
            mayer,
            feasibility: feas,
        })
    }
}

/// Interior grid nodes at which every signal is locally constant, with a
/// one-cell guard band around each breakpoint.
pub fn approximate_continuity_points(signals: &[&ControlSignal]) -> Vec<usize> {
    let cells = signals[0].cells();
    let mut bad = vec![false; cells + 1];
    bad[0] = true;
    bad[cells] = true;
    for s in signals {
        for b in s.breakpoints() {
            for k in b.saturating_sub(1)..=(b + 1).min(cells) {
                bad[k] = true;
            }
        }
    }
    (0..=cells).filter(|i| !bad[*i]).collect()
}

/// Least squares with x ≥ 0 (Lawson–Hanson active set).
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.ncols();
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * a.amax().max(1.0) * b.amax().max(1.0);
    for _ in 0..3 * n + 10 {
        let w = a.transpose() * (b - a * &x);
        let cand = (0..n).filter(|j| !passive[*j]).max_by(|i, j| w[*i].total_cmp(&w[*j]));
        match cand {
            Some(j) if w[j] > tol => passive[j] = true,
            _ => break,
        }
        loop {
            let idx: Vec<usize> = (0..n).filter(|j| passive[*j]).collect();
            let sub = DMatrix::from_fn(a.nrows(), idx.len(), |r, c| a[(r, idx[c])]);
            let sol = sub.svd(true, true).solve(b, 1e-14).unwrap_or_else(|_| DVector::zeros(idx.len()));
            let mut s = DVector::zeros(n);
            for (c, &j) in idx.iter().enumerate() {
                s[j] = sol[c];
            }
            if idx.iter().all(|&j| s[j] > 0.0) {
                x = s;
                break;
            }
            let mut alpha: f64 = 1.0;
            for &j in &idx {
                if s[j] <= 0.0 {
                    alpha = alpha.min(x[j] / (x[j] - s[j]));
                }
            }
            x = &x + (&s - &x) * alpha;
            for &j in &idx {
                if x[j] <= tol {
                    passive[j] = false;
                    x[j] = 0.0;
                }
            }
        }
    }
    x
}

/// max t subject to Σλv = 0, Σλ = 1, λ ≥ t: positive iff 0 is a strictly positive combination.
fn interior_margin(vs: &[DVector<f64>]) -> f64 {
    let d = vs[0].len();
    let mut lp = Lp::new(OptimizationDirection::Maximize);
    let lam: Vec<_> = vs.iter().map(|_| lp.add_var(0.0, (0.0, 1.0))).collect();
    let t = lp.add_var(1.0, (f64::NEG_INFINITY, 1.0));
    for r in 0..d {
        let mut e = LinearExpr::empty();
        for (l, v) in lam.iter().zip(vs) {
            if v[r] != 0.0 {
                e.add(*l, v[r]);
            }
        }
        lp.add_constraint(e, ComparisonOp::Eq, 0.0);
    }
    let mut sum = LinearExpr::empty();
    for l in &lam {
        sum.add(*l, 1.0);
    }
    lp.add_constraint(sum, ComparisonOp::Eq, 1.0);
    for l in &lam {
        lp.add_constraint([(*l, 1.0), (t, -1.0)], ComparisonOp::Ge, 0.0);
    }
    lp.solve().map(|s| s[t]).unwrap_or(f64::NEG_INFINITY)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HypothesisReport {
    pub ordering: bool,
    pub count: bool,
    pub continuity: bool,
    pub normal_multiplier: bool,
    /// max |H(τ, r) − H(τ, ū)|.
    pub equal_set_residual: f64,
    pub interior_skipped: bool,
    pub interior_margin: f64,
    pub interior_rank: usize,
    pub interior: bool,
    /// |∇(Φ,Ψ) Σ β𝒜| for the supplied β.
    pub balance_residual: f64,
    pub balance: bool,
    /// Non-negative least-squares β with Σβ = 1 and its residual.
    pub balance_beta: Vec<f64>,
    pub balance_beta_residual: f64,
    pub failed: Vec<String>,
}

/// Everything the quasi-pointwise sum needs, in frame coordinates.
#[derive(Debug, Clone)]
pub struct PointwiseTestData {
    pub taus: Vec<f64>,
    pub nodes: Vec<usize>,
    pub betas: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    /// Constraint rows of ∇Φ_i (i ≥ 1) and ∇Ψ, each already multiplied by Z⁻¹(T).
    pub grad_rows: Vec<DVector<f64>>,
    /// Σℓ∇²Φ + Σℓ_ψ∇²Ψ at x̄(T).
    pub boundary_hessian: DMatrix<f64>,
    pub a_vecs: Vec<DVector<f64>>,
    pub delta_h: Vec<DVector<f64>>,
    pub zinv_tau: Vec<DMatrix<f64>>,
    pub zinv_t: DMatrix<f64>,
    /// ∫_{τ_i}^{τ_{i+1}} Z⁻ᵀ ∇²H Z⁻¹ and the same with the curvature matrix.
    pub seg_hessian: Vec<DMatrix<f64>>,
    pub seg_curvature: Vec<DMatrix<f64>>,
    pub multiplier: Multiplier,
    pub hypotheses: HypothesisReport,
}

fn depends_on(e: &Expr, range: std::ops::Range<usize>) -> bool {
    range.into_iter().any(|i| e.uses_state(i))
}

/// Assembles the pointwise ingredients. Endpoint rows that only involve x(0)
/// are treated as fixing the initial point and dropped.
pub fn pointwise_ingredients(
    ctx: &PmpContext,
    ell: &Multiplier,
    spec: &PointwiseSpec,
    direction: Option<&ControlSignal>,
    exec: Execution,
) -> Result<PointwiseTestData, SecondOrderError> {
    let p = ctx.problem;
    let rd = ctx.reference;
    let n = p.n;
    ctx.validate(ell)?;
    if ctx.running.is_some() {
        return Err(SecondOrderError::Pointwise("running costs are not supported".into()));
    }
    let l = spec.taus.len();
    if l == 0 || spec.betas.len() != l || spec.r.len() != l {
        return Err(SecondOrderError::Pointwise("taus, betas and r must have the same non-zero length".into()));
    }
    if spec.betas.iter().any(|b| !(*b > 0.0)) {
        return Err(SecondOrderError::Pointwise("betas must be positive".into()));
    }
    for (i, r) in spec.r.iter().enumerate() {
        if r.len() != p.m || !p.control_set.contains(r) {
            return Err(ProblemError::new(ReasonCode::InvalidValue, format!("r[{i}] = {r:?} is not in U")).into());
        }
    }
    for (i, e) in p.phi.iter().enumerate() {
        if depends_on(e, 0..n) && depends_on(e, n..2 * n) {
            return Err(SecondOrderError::Pointwise(format!("phi[{i}] couples x(0) and x(T)")));
        }
    }
    let mut psi_rows = Vec::new();
    for (r, e) in p.psi.iter().enumerate() {
        match (depends_on(e, 0..n), depends_on(e, n..2 * n)) {
            (true, true) => return Err(SecondOrderError::Pointwise(format!("psi[{r}] couples x(0) and x(T)"))),
            (_, true) => psi_rows.push(r),
            _ => {}
        }
    }
    let phi_rows: Vec<usize> = (1..p.phi.len()).filter(|i| depends_on(&p.phi[*i], n..2 * n)).collect();

    let h = rd.step();
    let cells = rd.cells();
    let nodes: Vec<usize> = spec
        .taus
        .iter()
        .map(|t| ((t / h).round() as i64).clamp(0, cells as i64) as usize)
        .collect();
    let taus: Vec<f64> = nodes.iter().map(|i| rd.traj.times[*i]).collect();
    let ordering = nodes.windows(2).all(|w| w[0] < w[1]) && nodes[0] > 0 && nodes[l - 1] < cells;
    if !ordering {
        return Err(SecondOrderError::Pointwise(format!(
            "times must be strictly increasing inside (0, T) on the grid; snapped to {taus:?}"
        )));
    }
    let ubar = &rd.traj.control;
    let admissible = match direction {
        Some(u) => approximate_continuity_points(&[ubar, u]),
        None => approximate_continuity_points(&[ubar]),
    };
    let continuity = nodes.iter().all(|i| admissible.contains(i));

    let costate = ctx.solve_adjoint(ell)?;
    let z = &rd.z;
    let zinv_t = z.zinv.last().unwrap().clone();
    let lag = ctx.lagrangian(ell);
    let grad_rows: Vec<DVector<f64>> = phi_rows
        .iter()
        .map(|i| &ctx.jets.phi[*i].grad2)
        .chain(psi_rows.iter().map(|r| &ctx.jets.psi[*r].grad2))
        .map(|g| zinv_t.transpose() * g)
        .collect();

    let mut a_vecs = Vec::with_capacity(l);
    let mut delta_h = Vec::with_capacity(l);
    let mut zinv_tau = Vec::with_capacity(l);
    let mut eq_res: f64 = 0.0;
    for (k, &node) in nodes.iter().enumerate() {
        let st = rd.fd.station(node, Station::Left);
        let pv = costate.at(node, Station::Left);
        let r = &spec.r[k];
        let (a_r, f_r) = station_a_f(p, st, r);
        a_vecs.push(&z.z[node] * (&f_r - &st.fvec));
        delta_h.push((a_r - &st.a).transpose() * pv);
        zinv_tau.push(z.zinv[node].clone());
        eq_res = eq_res.max((pv.dot(&station_f(p, st, r)) - pv.dot(&st.fvec)).abs());
    }

    // Segment integrals between consecutive τ's, the last one ending at T.
    let mut bounds = nodes.clone();
    bounds.push(cells);
    let segs = exec.map_range(l, |k| {
        let mut sh = DMatrix::zeros(n, n);
        let mut sr = DMatrix::zeros(n, n);
        for i in bounds[k]..bounds[k + 1] {
            let mats = STATIONS.map(|s| {
                let st = rd.fd.station(i, s);
                let pv = costate.at(i, s);
                let zi = z.station(i, s).1;
                let mut qh = DMatrix::zeros(n, n);
                for c in 0..n {
                    qh += &st.b[c] * pv[c];
                }
                let qr = DMatrix::from_fn(n, n, |xi, zeta| {
                    let mut s = 0.0;
                    for a in 0..n {
                        for b in 0..n {
                            s += pv[a] * st.riemann.get(a, xi, b, zeta) * st.fvec[b];
                        }
                    }
                    s
                });
                (zi.transpose() * qh * zi, zi.transpose() * qr * zi)
            });
            sh += (&mats[0].0 + &mats[1].0 * 4.0 + &mats[2].0) * (h / 6.0);
            sr += (&mats[0].1 + &mats[1].1 * 4.0 + &mats[2].1) * (h / 6.0);
        }
        (sh, sr)
    });
    let (seg_hessian, seg_curvature): (Vec<_>, Vec<_>) = segs.into_iter().unzip();

    // Hypotheses ii) and iii).
    let d = grad_rows.len();
    let mut failed = Vec::new();
    let count = l > d;
    if !count {
        failed.push(format!("i) need at least {} times, got {l}", d + 1));
    }
    if !continuity {
        failed.push("i) a time lies at or next to a control breakpoint".into());
    }
    let normal_multiplier = ell.ell_phi[0] < 0.0;
    if !normal_multiplier {
        failed.push("the multiplier is not normal".into());
    }
    if eq_res > TOL_H {
        failed.push(format!("some r is outside the equal-Hamiltonian set (gap {eq_res:e})"));
    }
    let proj: Vec<DVector<f64>> = a_vecs
        .iter()
        .map(|a| DVector::from_iterator(d, grad_rows.iter().map(|g| g.dot(a))))
        .collect();
    let (interior_skipped, margin, rank, interior) = if d == 0 {
        (true, f64::INFINITY, 0, true)
    } else {
        let m = DMatrix::from_columns(&proj);
        let sv = m.clone().svd(false, false).singular_values;
        let smax = sv.max();
        let rank = sv.iter().filter(|s| **s > TOL_INT * smax.max(1.0)).count();
        let margin = interior_margin(&proj);
        let ok = margin > TOL_INT && rank == d;
        if !ok {
            failed.push(format!("ii) zero is not interior to the hull (margin {margin:e}, rank {rank}/{d})"));
        }
        (false, margin, rank, ok)
    };
    let (balance_residual, balance_beta, balance_beta_residual, balance) = if d == 0 {
        (0.0, spec.betas.clone(), 0.0, true)
    } else {
        let sum = proj.iter().zip(&spec.betas).fold(DVector::zeros(d), |acc, (v, b)| acc + v * *b);
        let bscale = spec.betas.iter().fold(0.0f64, |a, b| a.max(*b));
        let res = sum.norm() / bscale;
        let w = 1e3;
        let mut a = DMatrix::zeros(d + 1, l);
        let mut rhs = DVector::zeros(d + 1);
        for (c, v) in proj.iter().enumerate() {
            a.view_mut((0, c), (d, 1)).copy_from(v);
            a[(d, c)] = w;
        }
        rhs[d] = w;
        let beta = nnls(&a, &rhs);
        let bres = proj.iter().zip(beta.iter()).fold(DVector::zeros(d), |acc, (v, b)| acc + v * *b).norm();
        let ok = res <= TOL;
        if !ok {
            failed.push(format!("iii) supplied weights leave a constraint residual {res:e}"));
        }
        (res, beta.iter().copied().collect(), bres, ok)
    };
    let hypotheses = HypothesisReport {
        ordering,
        count,
        continuity,
        normal_multiplier,
        equal_set_residual: eq_res,
        interior_skipped,
        interior_margin: margin,
        interior_rank: rank,
        interior,
        balance_residual,
        balance,
        balance_beta,
        balance_beta_residual,
        failed,
    };
    Ok(PointwiseTestData {
        taus,
        nodes,
        betas: spec.betas.clone(),
        r: spec.r.clone(),
        grad_rows,
        boundary_hessian: lag.hess22,
        a_vecs,
        delta_h,
        zinv_tau,
        zinv_t,
        seg_hessian,
        seg_curvature,
        multiplier: ell.clone(),
        hypotheses,
    })
}

/// Quasi-pointwise left-hand side for given weights (pass `data.betas` normally).
pub fn quasi_pointwise_lhs_with(data: &PointwiseTestData, betas: &[f64]) -> SecondOrderReport {
    let n = data.zinv_t.nrows();
    let mut c = DVector::zeros(n);
    let mut terms = SecondOrderTerms::default();
    for k in 0..data.taus.len() {
        let b = betas[k];
        let dz = data.delta_h[k].transpose() * &data.zinv_tau[k];
        // ΔH Z⁻¹(τ)(Σ_{i<k} β𝒜 + ½ β_k 𝒜_k) with the overall factor ½ applied below.
        let half = &c + &data.a_vecs[k] * (0.5 * b);
        terms.cross += 2.0 * b * (&dz * half)[0];
        c += &data.a_vecs[k] * b;
        terms.hessian += c.dot(&(&data.seg_hessian[k] * &c));
        terms.curvature -= c.dot(&(&data.seg_curvature[k] * &c));
    }
    let y = &data.zinv_t * &c;
    terms.boundary = y.dot(&(&data.boundary_hessian * &y));
    let terms = SecondOrderTerms {
        hessian: 0.5 * terms.hessian,
        cross: 0.5 * terms.cross,
        curvature: 0.5 * terms.curvature,
        boundary: 0.5 * terms.boundary,
    };
    SecondOrderReport::new(terms, &data.multiplier)
}

pub fn quasi_pointwise_lhs(data: &PointwiseTestData) -> SecondOrderReport {
    quasi_pointwise_lhs_with(data, &data.betas)
}
