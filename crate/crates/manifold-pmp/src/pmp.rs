//! Adjoint equation, Hamiltonian maximization, transversality and a search
//! for Lagrange multipliers along a reference pair.

use std::collections::HashSet;

use minilp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem as Lp, Variable};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use thiserror::Error;

use crate::endpoint::{EndpointJet, EndpointJets};
use crate::expr::Expr;
use crate::geometry::{CoTangentVector, GeometryError, TangentVector};
use crate::par::Execution;
use crate::problem::{sample_controls, BolzaProblem, ControlProblem, ControlSignal, Multiplier, ProblemError};
use crate::trajectory::{
    backward_costate, simpson, station_f, LinearPath, ReferenceData, Station, StationData, STATIONS,
};

pub const TOL_H: f64 = 1e-6;
pub const TOL_ACTIVE: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PmpError {
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// H = p(f(t,x,u)) for a chart covector based at x.
pub fn hamiltonian(
    p: &ControlProblem,
    t: f64,
    x: &[f64],
    costate: &CoTangentVector,
    u: &[f64],
) -> Result<f64, GeometryError> {
    let v = TangentVector::new(crate::geometry::ChartPoint::new(x.to_vec()), p.f(t, x, u));
    if costate.base.coords.as_slice() != x {
        return Err(GeometryError::BaseMismatch);
    }
    costate.pair(&v)
}

/// Frame costate p⃗ at every station, for one multiplier.
#[derive(Debug, Clone)]
pub struct Costate {
    pub multiplier: Multiplier,
    pub path: LinearPath,
}

impl Costate {
    pub fn at(&self, i: usize, s: Station) -> &DVector<f64> {
        self.path.station(i, s)
    }

    pub fn initial(&self) -> &DVector<f64> {
        &self.path.nodes[0]
    }

    pub fn terminal(&self) -> &DVector<f64> {
        self.path.last()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PmpResiduals {
    /// max over nodes and sampled U of H(u) − H(ū).
    pub hamiltonian: f64,
    /// |p⃗(0) + d₁𝓛|.
    pub transversality: f64,
    /// max_i max(ℓ_φi, 0).
    pub sign: f64,
    /// max |ℓ_φi| over inactive i.
    pub complementarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PmpVerdicts {
    pub hamiltonian: bool,
    pub transversality: bool,
    pub sign: bool,
    pub complementarity: bool,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ActiveSets {
    pub i_ao: Vec<usize>,
    pub i_n: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Feasibility {
    pub phi_max: f64,
    pub psi_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PmpReport {
    pub multiplier: Multiplier,
    pub normal: bool,
    pub residuals: PmpResiduals,
    pub verdicts: PmpVerdicts,
    pub active_sets: ActiveSets,
    pub feasibility: Feasibility,
    /// Where the Hamiltonian residual is attained.
    pub worst_time: f64,
    pub worst_control: Vec<f64>,
}

/// Active sets from the reference endpoint values.
pub fn active_sets(jets: &EndpointJets) -> ActiveSets {
    let mut i_ao = vec![0];
    let mut i_n = Vec::new();
    for (i, j) in jets.phi.iter().enumerate().skip(1) {
        if j.value.abs() <= TOL_ACTIVE {
            i_ao.push(i);
        } else {
            i_n.push(i);
        }
    }
    ActiveSets { i_ao, i_n }
}

/// Problem, reference and endpoint jets bundled for repeated multiplier queries.
/// `running` is the Bolza integrand f⁰, weighted by ℓ_φ0.
#[derive(Debug, Clone)]
pub struct PmpContext<'a> {
    pub problem: &'a ControlProblem,
    pub reference: &'a ReferenceData,
    pub jets: EndpointJets,
    pub running: Option<&'a Expr>,
    pub samples: Vec<Vec<f64>>,
}

impl<'a> PmpContext<'a> {
    pub fn new(problem: &'a ControlProblem, reference: &'a ReferenceData) -> Result<Self, PmpError> {
        Ok(Self {
            problem,
            reference,
            jets: EndpointJets::at_reference(problem, reference),
            running: None,
            samples: sample_controls(&problem.control_set)?,
        })
    }

    pub fn bolza(b: &'a BolzaProblem, reference: &'a ReferenceData) -> Result<Self, PmpError> {
        let mut c = Self::new(&b.base, reference)?;
        c.running = Some(&b.f0);
        Ok(c)
    }

    fn cells(&self) -> usize {
        self.reference.cells()
    }

    /// Node index → (interval, station) used for node evaluations.
    fn node_station(&self, i: usize) -> (usize, Station) {
        if i == self.cells() {
            (i - 1, Station::Right)
        } else {
            (i, Station::Left)
        }
    }

    fn f0(&self, st: &StationData, u: &[f64]) -> f64 {
        self.running.map_or(0.0, |e| e.eval(st.x.as_slice(), u, st.t))
    }

    /// Framed d_x f⁰ at a station.
    fn f0_grad(&self, st: &StationData) -> Option<DVector<f64>> {
        self.running.map(|e| {
            let g = DVector::from_vec(e.grad_state(st.x.as_slice(), &st.u, st.t));
            st.e.transpose() * g
        })
    }

    pub fn validate(&self, ell: &Multiplier) -> Result<(), PmpError> {
        ell.validate(self.problem.j() + 1, self.problem.k())?;
        Ok(())
    }

    pub fn lagrangian(&self, ell: &Multiplier) -> EndpointJet {
        self.jets.lagrangian(ell)
    }

    /// Backward RK4 from p⃗(T) = d₂𝓛 with drift −ℓ₀ d f⁰ when a running cost is present.
    pub fn solve_adjoint(&self, ell: &Multiplier) -> Result<Costate, PmpError> {
        self.validate(ell)?;
        Ok(self.adjoint_unchecked(ell))
    }

    fn adjoint_unchecked(&self, ell: &Multiplier) -> Costate {
        let fd = &self.reference.fd;
        let p_t = self.lagrangian(ell).grad2;
        let l0 = ell.ell_phi[0];
        let path = match self.running {
            Some(_) if l0 != 0.0 => {
                let drive = |i: usize, s: Station| self.f0_grad(fd.station(i, s)).unwrap() * l0;
                backward_costate(fd, &p_t, Some(&drive))
            }
            _ => backward_costate(fd, &p_t, None),
        };
        Costate {
            multiplier: ell.clone(),
            path,
        }
    }

    /// p⃗(t) = p⃗(T) Z⁻¹(T) Z(t); only meaningful without running cost.
    pub fn closed_form_costate(&self, ell: &Multiplier) -> LinearPath {
        let z = &self.reference.z;
        let c = z.zinv.last().unwrap().transpose() * self.lagrangian(ell).grad2;
        LinearPath {
            nodes: z.z.iter().map(|m| m.transpose() * &c).collect(),
            mids: z.z_mid.iter().map(|m| m.transpose() * &c).collect(),
        }
    }

    /// H(u) at a station with the framed costate pv (plus ℓ₀ f⁰ for Bolza).
    pub fn hamiltonian_at(&self, st: &StationData, pv: &DVector<f64>, l0: f64, u: &[f64]) -> f64 {
        pv.dot(&station_f(self.problem, st, u)) + l0 * self.f0(st, u)
    }

    /// Node-wise max_u H(u) − H(ū); returns (value, node, control).
    fn hamiltonian_gap(&self, costate: &Costate, exec: Execution) -> (f64, usize, Vec<f64>) {
        let fd = &self.reference.fd;
        let l0 = costate.multiplier.ell_phi[0];
        let per_node = exec.map_range(self.cells() + 1, |i| {
            let (iv, s) = self.node_station(i);
            let st = fd.station(iv, s);
            let pv = costate.at(iv, s);
            // chart covector: p(v) = p⃗ · (D v)
            let pc = st.d.transpose() * pv;
            let h = |u: &[f64]| {
                let f = DVector::from_vec(self.problem.f(st.t, st.x.as_slice(), u));
                pc.dot(&f) + l0 * self.f0(st, u)
            };
            let href = h(&st.u);
            let mut best = (0.0, st.u.clone());
            for u in &self.samples {
                let g = h(u) - href;
                if g > best.0 {
                    best = (g, u.clone());
                }
            }
            best
        });
        let mut out = (0.0, 0, self.reference.traj.control.values[0].clone());
        for (i, (g, u)) in per_node.into_iter().enumerate() {
            if g > out.0 {
                out = (g, i, u);
            }
        }
        out
    }

    /// All first-order residuals, for the unit-normalised multiplier.
    pub fn residuals(&self, ell: &Multiplier, exec: Execution) -> Result<PmpReport, PmpError> {
        self.validate(ell)?;
        let unit = ell.unit();
        let costate = self.adjoint_unchecked(&unit);
        Ok(self.report_for(&costate, exec))
    }

    pub fn report_for(&self, costate: &Costate, exec: Execution) -> PmpReport {
        let ell = &costate.multiplier;
        let lag = self.lagrangian(ell);
        let (r_h, node, control) = self.hamiltonian_gap(costate, exec);
        let r_tr = (costate.initial() + &lag.grad1).norm();
        let sign = ell.ell_phi.iter().fold(0.0f64, |a, v| a.max(*v));
        let sets = active_sets(&self.jets);
        let comp = sets.i_n.iter().fold(0.0f64, |a, i| a.max(ell.ell_phi[*i].abs()));
        let verdicts = PmpVerdicts {
            hamiltonian: r_h <= TOL_H,
            transversality: r_tr <= TOL_H,
            sign: sign <= TOL_H,
            complementarity: comp <= TOL_H,
            pass: r_h <= TOL_H && r_tr <= TOL_H && sign <= TOL_H && comp <= TOL_H,
        };
        let feasibility = Feasibility {
            phi_max: self.jets.phi.iter().skip(1).fold(0.0f64, |a, j| a.max(j.value)),
            psi_max: self.jets.psi.iter().fold(0.0f64, |a, j| a.max(j.value.abs())),
        };
        PmpReport {
            multiplier: ell.normalized(),
            normal: ell.is_normal(TOL_H),
            residuals: PmpResiduals {
                hamiltonian: r_h,
                transversality: r_tr,
                sign,
                complementarity: comp,
            },
            verdicts,
            active_sets: sets,
            feasibility,
            worst_time: self.reference.traj.times[node],
            worst_control: control,
        }
    }

    /// ∫ [H(σ) − H(ū)] dt + (d₁𝓛 + p(0))(W), with W in chart components at x̄(0).
    pub fn integral_first_order(&self, costate: &Costate, w: &[f64], sigma: &ControlSignal) -> f64 {
        let fd = &self.reference.fd;
        let l0 = costate.multiplier.ell_phi[0];
        let mut total = 0.0;
        for i in 0..self.cells() {
            let s = &sigma.values[i];
            let vals: Vec<f64> = STATIONS
                .iter()
                .map(|&k| {
                    let st = fd.station(i, k);
                    let pv = costate.at(i, k);
                    self.hamiltonian_at(st, pv, l0, s) - self.hamiltonian_at(st, pv, l0, &st.u)
                })
                .collect();
            total += simpson(fd.step, vals[0], vals[1], vals[2]);
        }
        let wf = self.reference.frame_coords0(w);
        let lag = self.lagrangian(&costate.multiplier);
        total + (lag.grad1 + costate.initial()).dot(&wf)
    }

    /// Samples u with |H(u) − H(ū)| ≤ tol at each node.
    pub fn equal_hamiltonian_set(&self, costate: &Costate, tol: f64, exec: Execution) -> Vec<Vec<Vec<f64>>> {
        let fd = &self.reference.fd;
        let l0 = costate.multiplier.ell_phi[0];
        exec.map_range(self.cells() + 1, |i| {
            let (iv, s) = self.node_station(i);
            let st = fd.station(iv, s);
            let pv = costate.at(iv, s);
            let href = self.hamiltonian_at(st, pv, l0, &st.u);
            self.samples
                .iter()
                .filter(|u| (self.hamiltonian_at(st, pv, l0, u) - href).abs() <= tol)
                .cloned()
                .collect()
        })
    }

    /// Grid search on the multiplier sphere followed by LP refinement.
    pub fn find_multipliers(&self, opts: &SearchOptions, exec: Execution) -> MultiplierSearch {
        search(self, opts, exec)
    }
}

/// Convenience wrappers for Mayer problems.
pub fn solve_adjoint(p: &ControlProblem, rd: &ReferenceData, ell: &Multiplier) -> Result<Costate, PmpError> {
    PmpContext::new(p, rd)?.solve_adjoint(ell)
}

pub fn pmp_residuals(p: &ControlProblem, rd: &ReferenceData, ell: &Multiplier, exec: Execution) -> Result<PmpReport, PmpError> {
    PmpContext::new(p, rd)?.residuals(ell, exec)
}

pub fn find_multipliers(p: &ControlProblem, rd: &ReferenceData, exec: Execution) -> Result<MultiplierSearch, PmpError> {
    Ok(PmpContext::new(p, rd)?.find_multipliers(&SearchOptions::default(), exec))
}

#[derive(Debug, Clone)]
pub struct SearchOptions {
    /// Random directions on the sphere, on top of axes and pair diagonals.
    pub sphere_points: usize,
    /// Distinct starting clusters refined by LP.
    pub clusters: usize,
    pub tol_h: f64,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self {
            sphere_points: 2000,
            clusters: 8,
            tol_h: TOL_H,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MultiplierSearch {
    pub found: Vec<(Multiplier, PmpReport)>,
    pub candidates: usize,
    /// Smallest LP residual seen (normalised by |ℓ|).
    pub best_residual: f64,
    pub message: Option<String>,
}

/// Residuals are linear in ℓ: p⃗ = Σ ℓ_q P_q. This holds the pieces.
struct LinearModel {
    /// Free coordinates of ℓ (inactive φ indices removed).
    free: Vec<usize>,
    /// Number of φ coordinates among `free` (they come first).
    n_phi: usize,
    dim: usize,
    /// Deduplicated rows g with H(u) − H(ū) = ℓ·g.
    gaps: Vec<DVector<f64>>,
    /// Transversality map: p⃗(0) + d₁𝓛 = T ℓ.
    trans: DMatrix<f64>,
}

impl LinearModel {
    fn build(ctx: &PmpContext, exec: Execution) -> Self {
        let j1 = ctx.problem.j() + 1;
        let k = ctx.problem.k();
        let d = j1 + k;
        let sets = active_sets(&ctx.jets);
        let free: Vec<usize> = (0..d).filter(|i| !sets.i_n.contains(i)).collect();
        let n_phi = free.iter().filter(|&&i| i < j1).count();
        let basis: Vec<Costate> = free
            .iter()
            .map(|&q| {
                let mut v = vec![0.0; d];
                v[q] = 1.0;
                ctx.adjoint_unchecked(&Multiplier::from_flat(&v, j1))
            })
            .collect();
        let n = ctx.problem.n;
        let mut trans = DMatrix::zeros(n, free.len());
        for (c, &q) in free.iter().enumerate() {
            let mut v = vec![0.0; d];
            v[q] = 1.0;
            let lag = ctx.lagrangian(&Multiplier::from_flat(&v, j1));
            trans.set_column(c, &(basis[c].initial() + lag.grad1));
        }
        let fd = &ctx.reference.fd;
        let rows = exec.map_range(ctx.cells() + 1, |i| {
            let (iv, s) = ctx.node_station(i);
            let st = fd.station(iv, s);
            let fref = station_f(ctx.problem, st, &st.u);
            let f0ref = ctx.f0(st, &st.u);
            ctx.samples
                .iter()
                .map(|u| {
                    let df = station_f(ctx.problem, st, u) - &fref;
                    let df0 = ctx.f0(st, u) - f0ref;
                    DVector::from_fn(free.len(), |c, _| {
                        basis[c].at(iv, s).dot(&df) + if free[c] == 0 { df0 } else { 0.0 }
                    })
                })
                .collect::<Vec<_>>()
        });
        let mut seen = HashSet::new();
        let mut gaps = Vec::new();
        for g in rows.into_iter().flatten() {
            let key: Vec<i64> = g.iter().map(|v| (v * 1e12).round() as i64).collect();
            if key.iter().all(|v| *v == 0) {
                continue;
            }
            if seen.insert(key) {
                gaps.push(g);
            }
        }
        Self {
            free,
            n_phi,
            dim: d,
            gaps,
            trans,
        }
    }

    /// Total residual max(0, max g·ℓ) + |Tℓ|∞ for a unit ℓ.
    fn residual(&self, l: &DVector<f64>) -> f64 {
        let h = self.gaps.iter().fold(0.0f64, |a, g| a.max(g.dot(l)));
        h + (&self.trans * l).amax()
    }

    fn project(&self, mut v: DVector<f64>) -> Option<DVector<f64>> {
        for c in 0..self.n_phi {
            v[c] = -v[c].abs();
        }
        let nrm = v.norm();
        (nrm > 1e-12).then(|| v / nrm)
    }

    fn full(&self, l: &DVector<f64>, j1: usize) -> Multiplier {
        let mut v = vec![0.0; self.dim];
        for (c, &q) in self.free.iter().enumerate() {
            v[q] = l[c];
        }
        Multiplier::from_flat(&v, j1)
    }

    /// min s subject to g·ℓ ≤ s, |Tℓ| ≤ s, c·ℓ = 1, by cutting planes over the g rows.
    fn refine(&self, c: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
        let m = self.free.len();
        let bound = 1e3;
        let mut lp = Lp::new(OptimizationDirection::Minimize);
        let vars: Vec<Variable> = (0..m)
            .map(|q| {
                if q < self.n_phi {
                    lp.add_var(0.0, (-bound, 0.0))
                } else {
                    lp.add_var(0.0, (-bound, bound))
                }
            })
            .collect();
        let s = lp.add_var(1.0, (0.0, f64::INFINITY));
        let row = |coef: &[f64], with_s: f64| {
            let mut e = LinearExpr::empty();
            for (v, a) in vars.iter().zip(coef) {
                if *a != 0.0 {
                    e.add(*v, *a);
                }
            }
            e.add(s, with_s);
            e
        };
        let mut eq = LinearExpr::empty();
        for (v, a) in vars.iter().zip(c.iter()) {
            eq.add(*v, *a);
        }
        lp.add_constraint(eq, ComparisonOp::Eq, 1.0);
        for r in 0..self.trans.nrows() {
            let coef: Vec<f64> = self.trans.row(r).iter().copied().collect();
            lp.add_constraint(row(&coef, -1.0), ComparisonOp::Le, 0.0);
            let neg: Vec<f64> = coef.iter().map(|v| -v).collect();
            lp.add_constraint(row(&neg, -1.0), ComparisonOp::Le, 0.0);
        }
        let mut order: Vec<usize> = (0..self.gaps.len()).collect();
        order.sort_by(|a, b| self.gaps[*b].dot(c).total_cmp(&self.gaps[*a].dot(c)));
        let mut used = vec![false; self.gaps.len()];
        for &i in order.iter().take(64) {
            used[i] = true;
            lp.add_constraint(row(self.gaps[i].as_slice(), -1.0), ComparisonOp::Le, 0.0);
        }
        let mut sol = lp.solve().ok()?;
        for _ in 0..200 {
            let l = DVector::from_fn(m, |q, _| sol[vars[q]]);
            let sv = sol[s];
            let mut viol: Vec<(f64, usize)> = self
                .gaps
                .iter()
                .enumerate()
                .filter(|(i, _)| !used[*i])
                .map(|(i, g)| (g.dot(&l) - sv, i))
                .filter(|(v, _)| *v > 1e-13)
                .collect();
            if viol.is_empty() {
                return Some((l, sv));
            }
            viol.sort_by(|a, b| b.0.total_cmp(&a.0));
            for &(_, i) in viol.iter().take(64) {
                used[i] = true;
                sol = sol
                    .add_constraint(row(self.gaps[i].as_slice(), -1.0), ComparisonOp::Le, 0.0)
                    .ok()?;
            }
        }
        None
    }
}

fn search(ctx: &PmpContext, opts: &SearchOptions, exec: Execution) -> MultiplierSearch {
    let j1 = ctx.problem.j() + 1;
    let model = LinearModel::build(ctx, exec);
    let m = model.free.len();
    // Candidate directions: axes, pair diagonals, random points.
    let mut cands: Vec<DVector<f64>> = Vec::new();
    for a in 0..m {
        for sa in [1.0, -1.0] {
            let mut v = DVector::zeros(m);
            v[a] = sa;
            cands.push(v.clone());
            for b in a + 1..m {
                for sb in [1.0, -1.0] {
                    let mut w = v.clone();
                    w[b] = sb;
                    cands.push(w);
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for _ in 0..opts.sphere_points {
        cands.push(DVector::from_fn(m, |_, _| StandardNormal.sample(&mut rng)));
    }
    let cands: Vec<DVector<f64>> = cands.into_iter().filter_map(|v| model.project(v)).collect();
    let scores = exec.map(&cands, |c| model.residual(c));
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]).then(a.cmp(b)));
    let mut seeds: Vec<&DVector<f64>> = Vec::new();
    for &i in &order {
        if seeds.len() >= opts.clusters {
            break;
        }
        if seeds.iter().all(|s| s.dot(&cands[i]) < 0.95) {
            seeds.push(&cands[i]);
        }
    }
    let refined = exec.map(&seeds, |c| model.refine(c));
    let mut best = f64::INFINITY;
    let mut rays: Vec<DVector<f64>> = Vec::new();
    let mut found = Vec::new();
    for (l, s) in refined.into_iter().flatten() {
        let nrm = l.norm();
        if nrm < 1e-12 {
            continue;
        }
        let unit = &l / nrm;
        best = best.min(s / nrm);
        if s / nrm > opts.tol_h || rays.iter().any(|r| (r - &unit).amax() < 1e-6) {
            continue;
        }
        let ell = model.full(&unit, j1);
        let costate = ctx.adjoint_unchecked(&ell);
        let report = ctx.report_for(&costate, exec);
        if report.verdicts.pass {
            rays.push(unit);
            found.push((ell.normalized(), report));
        }
    }
    let message = found
        .is_empty()
        .then(|| "no multiplier found at this resolution".to_string());
    MultiplierSearch {
        found,
        candidates: cands.len(),
        best_residual: best,
        message,
    }
}
