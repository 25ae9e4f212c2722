//! First- and second-order variational fields along the reference and the
//! critical-direction test.

use nalgebra::DVector;
use serde::Serialize;

use crate::endpoint::{EndpointJet, EndpointJets};
use crate::par::Execution;
use crate::pmp::active_sets;
use crate::problem::{ControlProblem, ControlSignal};
use crate::trajectory::{
    forward_linear, simpson, station_a_f, LinearPath, ReferenceData, Station, StationData, STATIONS,
};

pub const TOL: f64 = 1e-6;
pub const TOL_STRICT: f64 = 1e-4;

/// −½ R(e_i, X, f, X) in frame components.
pub fn curvature_drive(st: &StationData, x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    if st.riemann.is_zero() {
        return DVector::zeros(n);
    }
    let f = &st.fvec;
    DVector::from_fn(n, |i, _| {
        let mut s = 0.0;
        for a in 0..n {
            if x[a] == 0.0 {
                continue;
            }
            for b in 0..n {
                for c in 0..n {
                    s += st.riemann.get(i, a, b, c) * x[a] * f[b] * x[c];
                }
            }
        }
        -0.5 * s
    })
}

/// ½ B(X, X) in frame components.
pub fn hessian_drive(b: &[nalgebra::DMatrix<f64>], x: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |k, _| 0.5 * x.dot(&(&b[k] * x)))
}

/// Per-station direction data: f⃗(u) − f⃗(ū) and A(u) − A(ū).
#[derive(Debug, Clone)]
pub struct DirectionData {
    pub df: Vec<[DVector<f64>; 3]>,
    pub da: Vec<[nalgebra::DMatrix<f64>; 3]>,
}

impl DirectionData {
    pub fn new(p: &ControlProblem, rd: &ReferenceData, u: &ControlSignal, exec: Execution) -> Self {
        let per = exec.map_range(rd.cells(), |i| {
            let mk = |s: Station| {
                let st = rd.fd.station(i, s);
                let (a, f) = station_a_f(p, st, &u.values[i]);
                (f - &st.fvec, a - &st.a)
            };
            let [l, m, r] = STATIONS.map(mk);
            ([l.0, m.0, r.0], [l.1, m.1, r.1])
        });
        let (df, da) = per.into_iter().unzip();
        Self { df, da }
    }

    pub fn df(&self, i: usize, s: Station) -> &DVector<f64> {
        &self.df[i][s as usize]
    }

    pub fn da(&self, i: usize, s: Station) -> &nalgebra::DMatrix<f64> {
        &self.da[i][s as usize]
    }
}

/// Ẋ⃗ = A(t,ū)X⃗ + f⃗(u) − f⃗(ū), X⃗(0) = frame coordinates of V.
pub fn solve_linearized(p: &ControlProblem, rd: &ReferenceData, u: &ControlSignal, v: &[f64]) -> LinearPath {
    let dd = DirectionData::new(p, rd, u, Execution::Sequential);
    solve_linearized_with(rd, &dd, &rd.frame_coords0(v))
}

pub fn solve_linearized_with(rd: &ReferenceData, dd: &DirectionData, v_frame: &DVector<f64>) -> LinearPath {
    forward_linear(&rd.fd, v_frame, &|i, s| dd.df(i, s).clone())
}

/// X⃗(t_i) = Z⁻¹(t_i)[V⃗ + ∫₀^{t_i} Z (f⃗(u) − f⃗(ū))].
pub fn linearized_closed_form(rd: &ReferenceData, dd: &DirectionData, v_frame: &DVector<f64>) -> Vec<DVector<f64>> {
    let z = &rd.z;
    let h = rd.step();
    let mut acc = v_frame.clone();
    let mut out = vec![&z.zinv[0] * &acc];
    for i in 0..rd.cells() {
        let vals: Vec<DVector<f64>> = STATIONS
            .iter()
            .map(|&s| z.station(i, s).0 * dd.df(i, s))
            .collect();
        acc += (&vals[0] + &vals[1] * 4.0 + &vals[2]) * (h / 6.0);
        out.push(&z.zinv[i + 1] * &acc);
    }
    out
}

/// Y⃗ drive without the λ term: ½B(X,X) + ΔA X − ½R(·,X,f,X).
pub fn second_variation_drive(rd: &ReferenceData, dd: &DirectionData, x: &LinearPath, i: usize, s: Station) -> DVector<f64> {
    let st = rd.fd.station(i, s);
    let xv = x.station(i, s);
    hessian_drive(&st.b, xv) + dd.da(i, s) * xv + curvature_drive(st, xv)
}

/// Forward solve of the second-order variational equation.
#[allow(clippy::too_many_arguments)]
pub fn solve_second_variation(
    p: &ControlProblem,
    rd: &ReferenceData,
    u: &ControlSignal,
    x: &LinearPath,
    sigma: &ControlSignal,
    lambda: f64,
    w: &[f64],
) -> LinearPath {
    let dd = DirectionData::new(p, rd, u, Execution::Sequential);
    let ds = DirectionData::new(p, rd, sigma, Execution::Sequential);
    solve_second_variation_with(rd, &dd, x, &[(&ds, lambda)], &rd.frame_coords0(w))
}

/// Same, with several (σ, λ) terms summed (ν-weights folded into λ).
pub fn solve_second_variation_with(
    rd: &ReferenceData,
    dd: &DirectionData,
    x: &LinearPath,
    sigmas: &[(&DirectionData, f64)],
    w_frame: &DVector<f64>,
) -> LinearPath {
    forward_linear(&rd.fd, w_frame, &|i, s| {
        let mut b = second_variation_drive(rd, dd, x, i, s);
        for (ds, lam) in sigmas {
            b += ds.df(i, s) * *lam;
        }
        b
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct VariationBundle {
    #[serde(skip)]
    pub control: ControlSignal,
    /// V in frame coordinates.
    pub v: Vec<f64>,
    #[serde(skip)]
    pub x: LinearPath,
    pub x_t: Vec<f64>,
    /// ∇₁φ_i(V) + ∇₂φ_i(X(T)) for every φ index.
    pub g: Vec<f64>,
    /// ∇₁ψ(V) + ∇₂ψ(X(T)).
    pub psi_rows: Vec<f64>,
    pub i_ao: Vec<usize>,
    pub i_n: Vec<usize>,
    pub i0_strict: Vec<usize>,
    pub i0_active: Vec<usize>,
    /// D²φ_i and D²ψ_r.
    pub d2_phi: Vec<f64>,
    pub d2_psi: Vec<f64>,
    pub critical: bool,
}

impl VariationBundle {
    pub fn v_frame(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.v)
    }

    pub fn x_final(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.x_t)
    }

    /// Largest violation of the criticality inequalities/equalities.
    pub fn criticality_residual(&self) -> f64 {
        let ineq = self.i_ao.iter().fold(0.0f64, |a, i| a.max(self.g[*i]));
        let eq = self.psi_rows.iter().fold(0.0f64, |a, r| a.max(r.abs()));
        ineq.max(eq)
    }
}

/// Which endpoint function a second difference refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointRow {
    Phi(usize),
    Psi(usize),
}

/// D²φ(u,V) = ∇₁²φ(V,V) + 2∇₂∇₁φ(V,X(T)) + ∇₂²φ(X(T),X(T)).
pub fn endpoint_second_difference(jets: &EndpointJets, bundle: &VariationBundle, row: EndpointRow) -> f64 {
    let jet: &EndpointJet = match row {
        EndpointRow::Phi(i) => &jets.phi[i],
        EndpointRow::Psi(r) => &jets.psi[r],
    };
    jet.second(&bundle.v_frame(), &bundle.x_final())
}

/// Builds the bundle for (u, V) with the linearized field already solved.
pub fn bundle_from(
    jets: &EndpointJets,
    control: &ControlSignal,
    v_frame: DVector<f64>,
    x: LinearPath,
) -> VariationBundle {
    let xt = x.last().clone();
    let g: Vec<f64> = jets.phi.iter().map(|j| j.first(&v_frame, &xt)).collect();
    let psi_rows: Vec<f64> = jets.psi.iter().map(|j| j.first(&v_frame, &xt)).collect();
    let sets = active_sets(jets);
    let mut i0_strict = sets.i_n.clone();
    for &i in &sets.i_ao {
        if g[i] < -TOL_STRICT {
            i0_strict.push(i);
        }
    }
    i0_strict.sort_unstable();
    let i0_active: Vec<usize> = (0..jets.phi.len()).filter(|i| !i0_strict.contains(i)).collect();
    let critical = sets.i_ao.iter().all(|&i| g[i] <= TOL) && psi_rows.iter().all(|r| r.abs() <= TOL);
    let d2_phi = jets.phi.iter().map(|j| j.second(&v_frame, &xt)).collect();
    let d2_psi = jets.psi.iter().map(|j| j.second(&v_frame, &xt)).collect();
    VariationBundle {
        control: control.clone(),
        v: v_frame.iter().copied().collect(),
        x,
        x_t: xt.iter().copied().collect(),
        g,
        psi_rows,
        i_ao: sets.i_ao,
        i_n: sets.i_n,
        i0_strict,
        i0_active,
        d2_phi,
        d2_psi,
        critical,
    }
}

/// Solves X for (u, V) and classifies the direction.
pub fn critical_direction_check(
    p: &ControlProblem,
    rd: &ReferenceData,
    jets: &EndpointJets,
    u: &ControlSignal,
    v: &[f64],
) -> (bool, VariationBundle) {
    let x = solve_linearized(p, rd, u, v);
    let b = bundle_from(jets, u, rd.frame_coords0(v), x);
    (b.critical, b)
}

/// Measure-weighted first-order cost change ∫ p⃗·(f⃗(u) − f⃗(ū)) for a given frame covector path.
pub fn pairing_integral(rd: &ReferenceData, dd: &DirectionData, p: &LinearPath) -> f64 {
    let h = rd.step();
    (0..rd.cells())
        .map(|i| {
            let v = STATIONS.map(|s| p.station(i, s).dot(dd.df(i, s)));
            simpson(h, v[0], v[1], v[2])
        })
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ManifoldModel;
    use crate::testutil::{endpoint_exprs, simple_problem};
    use nalgebra::DMatrix;

    fn warga(grid: usize) -> (ControlProblem, ReferenceData) {
        let mut p = simple_problem(ManifoldModel::euclidean(2), &["x2*(u1+u2)", "u2 - x1"], 2, 1.0, grid);
        p.phi = endpoint_exprs(2, &["x1_T"]);
        p.psi = endpoint_exprs(2, &["x1_0", "x2_0", "x2_T"]);
        let rd = ReferenceData::build(&p, &[0.0, 0.0], &ControlSignal::constant(1.0, grid, &[0.0, 0.0]), Execution::Sequential).unwrap();
        (p, rd)
    }

    fn switching(grid: usize) -> ControlSignal {
        ControlSignal::from_fn(1.0, grid, |t| vec![1.0, if t <= 0.5 { -1.0 } else { 1.0 }])
    }

    #[test]
    fn warga_linearized() {
        let (p, rd) = warga(64);
        let u = switching(64);
        let x = solve_linearized(&p, &rd, &u, &[0.0, 0.0]);
        for (i, xv) in x.nodes.iter().enumerate() {
            let t = i as f64 / 64.0;
            let want = if t <= 0.5 { -t } else { t - 1.0 };
            assert!(xv[0].abs() < 1e-12);
            assert!((xv[1] - want).abs() < 1e-12, "{i} {xv}");
        }
        let jets = EndpointJets::at_reference(&p, &rd);
        let (crit, b) = critical_direction_check(&p, &rd, &jets, &u, &[0.0, 0.0]);
        assert!(crit);
        assert_eq!(b.i0_active, vec![0]);
        assert!(b.d2_psi.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn zero_direction() {
        let (p, rd) = warga(32);
        let jets = EndpointJets::at_reference(&p, &rd);
        let (crit, b) = critical_direction_check(&p, &rd, &jets, &rd.traj.control.clone(), &[0.0, 0.0]);
        assert!(crit);
        assert!(b.g.iter().all(|g| *g == 0.0));
        assert_eq!(b.i0_active, vec![0]);
        assert!(b.x.nodes.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn violated_equality_row() {
        let (p, rd) = warga(64);
        let jets = EndpointJets::at_reference(&p, &rd);
        // u₂ = −1 on [0, 0.55]: X₂(T) = −0.1.
        let u = ControlSignal::from_fn(1.0, 64, |t| vec![1.0, if t <= 0.55 { -1.0 } else { 1.0 }]);
        let (crit, b) = critical_direction_check(&p, &rd, &jets, &u, &[0.0, 0.0]);
        assert!(!crit);
        assert!((b.psi_rows[2] + 0.09375).abs() < 1e-9, "{:?}", b.psi_rows);
    }

    #[test]
    fn matrix_exponential_oracle() {
        let p = simple_problem(ManifoldModel::euclidean(2), &["-0.5*x1 + 2*x2", "-x1 - 0.3*x2"], 1, 1.0, 128);
        let rd = ReferenceData::build(&p, &[0.0, 0.0], &ControlSignal::constant(1.0, 128, &[0.0]), Execution::Sequential).unwrap();
        let v = [0.7, -0.4];
        let x = solve_linearized(&p, &rd, &rd.traj.control.clone(), &v);
        let m = DMatrix::from_row_slice(2, 2, &[-0.5, 2.0, -1.0, -0.3]);
        for (i, xv) in x.nodes.iter().enumerate().step_by(16) {
            let t = i as f64 / 128.0;
            let want = (m.clone() * t).exp() * DVector::from_row_slice(&v);
            assert!((xv - want).amax() < 1e-8);
        }
    }

    #[test]
    fn closed_form_agrees() {
        let p = simple_problem(ManifoldModel::euclidean(2), &["x2 + sin(x1)*u1", "-x1 + u1^2"], 1, 1.0, 128);
        let rd = ReferenceData::build(&p, &[0.2, 0.1], &ControlSignal::constant(1.0, 128, &[0.3]), Execution::Sequential).unwrap();
        let u = ControlSignal::from_fn(1.0, 128, |t| vec![(3.0 * t).sin()]);
        let dd = DirectionData::new(&p, &rd, &u, Execution::Parallel);
        let v = DVector::from_vec(vec![0.1, -0.2]);
        let ode = solve_linearized_with(&rd, &dd, &v);
        let cf = linearized_closed_form(&rd, &dd, &v);
        for (a, b) in ode.nodes.iter().zip(&cf) {
            assert!((a - b).amax() < 1e-6);
        }
    }

    #[test]
    fn superposition() {
        let p = simple_problem(ManifoldModel::sphere2(), &["u1", "sin(x1)*u1 + 0.2"], 1, 1.0, 64);
        let rd = ReferenceData::build(&p, &[1.0, 0.0], &ControlSignal::constant(1.0, 64, &[0.4]), Execution::Sequential).unwrap();
        let ub = rd.traj.control.clone();
        let a = solve_linearized(&p, &rd, &ub, &[0.1, 0.2]);
        let b = solve_linearized(&p, &rd, &ub, &[-0.3, 0.05]);
        let c = solve_linearized(&p, &rd, &ub, &[-0.2, 0.25]);
        for i in 0..=64 {
            assert!((&a.nodes[i] + &b.nodes[i] - &c.nodes[i]).amax() < 1e-9);
        }
    }

    #[test]
    fn y_affine_in_lambda_w() {
        let p = simple_problem(ManifoldModel::sphere2(), &["u1", "sin(x1)*u1 + 0.2"], 1, 1.0, 64);
        let rd = ReferenceData::build(&p, &[1.0, 0.0], &ControlSignal::constant(1.0, 64, &[0.4]), Execution::Sequential).unwrap();
        let u = ControlSignal::constant(1.0, 64, &[0.9]);
        let sigma = ControlSignal::constant(1.0, 64, &[-0.5]);
        let x = solve_linearized(&p, &rd, &u, &[0.1, 0.0]);
        let y = |lam: f64, w: [f64; 2]| solve_second_variation(&p, &rd, &u, &x, &sigma, lam, &w).last().clone();
        let y1 = y(0.5, [0.0, 0.1]);
        let y2 = y(1.5, [0.2, -0.1]);
        let y3 = y(2.5, [0.4, -0.3]);
        assert!((&y3 - &y2 - (&y2 - &y1)).amax() < 1e-8);
    }

    #[test]
    fn flat_y_reduces_to_linearized() {
        let p = simple_problem(ManifoldModel::euclidean(2), &["x2", "-x1 + u1"], 1, 1.0, 64);
        let rd = ReferenceData::build(&p, &[0.0, 0.0], &ControlSignal::constant(1.0, 64, &[0.0]), Execution::Sequential).unwrap();
        let ub = rd.traj.control.clone();
        let sigma = ControlSignal::constant(1.0, 64, &[1.0]);
        let x = solve_linearized(&p, &rd, &ub, &[0.0, 0.0]);
        let y = solve_second_variation(&p, &rd, &ub, &x, &sigma, 2.0, &[0.0, 0.0]);
        let lin = solve_linearized(&p, &rd, &ControlSignal::constant(1.0, 64, &[2.0]), &[0.0, 0.0]);
        assert!(y.sup_distance(&lin) < 1e-12);
    }

    #[test]
    fn sphere_curvature_drive() {
        // Equator at unit speed; X along the meridian direction.
        let p = simple_problem(ManifoldModel::sphere2(), &["0", "u1"], 1, 1.0, 16);
        let rd = ReferenceData::build(&p, &[std::f64::consts::FRAC_PI_2, 0.0], &ControlSignal::constant(1.0, 16, &[1.0]), Execution::Sequential).unwrap();
        let st = rd.fd.station(3, Station::Mid);
        let x = DVector::from_vec(vec![0.3, 0.0]);
        let d = curvature_drive(st, &x);
        // R(e_i, X, f, X) = ⟨e_i,X⟩⟨X,f⟩ − ⟨e_i,f⟩|X|² on the unit sphere
        let want = [0.0, 0.5 * 0.09 * st.fvec[1]];
        assert!((d[0] - want[0]).abs() < 1e-4 && (d[1] - want[1]).abs() < 1e-4, "{d}");
        let flat = simple_problem(ManifoldModel::euclidean(2), &["0", "u1"], 1, 1.0, 16);
        let rf = ReferenceData::build(&flat, &[0.0, 0.0], &ControlSignal::constant(1.0, 16, &[1.0]), Execution::Sequential).unwrap();
        assert_eq!(curvature_drive(rf.fd.station(0, Station::Left), &x).norm(), 0.0);
    }

    #[test]
    fn quadratic_endpoint_second_difference() {
        let mut p = simple_problem(ManifoldModel::euclidean(2), &["u1", "0"], 1, 1.0, 16);
        p.phi = endpoint_exprs(2, &["0.5*(x1_T^2 + x2_T^2)", "x1_T + 2*x2_0"]);
        let rd = ReferenceData::build(&p, &[0.0, 0.0], &ControlSignal::constant(1.0, 16, &[0.0]), Execution::Sequential).unwrap();
        let jets = EndpointJets::at_reference(&p, &rd);
        let (_, b) = critical_direction_check(&p, &rd, &jets, &ControlSignal::constant(1.0, 16, &[0.5]), &[0.0, 0.0]);
        let q = endpoint_second_difference(&jets, &b, EndpointRow::Phi(0));
        assert!((q - 0.25).abs() < 1e-6);
        assert!(endpoint_second_difference(&jets, &b, EndpointRow::Phi(1)).abs() < 1e-6);
    }
}
