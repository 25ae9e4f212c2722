//! State integration, the parallel frame along the reference trajectory, and the
//! frame-coordinate coefficient data used by every linear ODE downstream.
//!
//! Each grid interval carries three stations (left node, RK4 half-step midpoint,
//! right node). Coefficients at the stations always use the interval's own
//! control value, so one-sided limits at control breakpoints are respected.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::geometry::{gram_schmidt, Christoffel, GeometryError, ManifoldModel, Riemann, Segment};
use crate::par::Execution;
use crate::problem::{ControlProblem, ControlSignal, ProblemError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrajectoryError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error("state left the chart domain at t = {time} (point {coords:?})")]
    DomainExit { time: f64, coords: Vec<f64> },
    #[error("non-finite dynamics value at t = {time}")]
    NonFinite { time: f64 },
    #[error("seed basis is not orthonormal (Gram error {0:e})")]
    SeedBasis(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Station {
    Left = 0,
    Mid = 1,
    Right = 2,
}

pub const STATIONS: [Station; 3] = [Station::Left, Station::Mid, Station::Right];

impl Station {
    pub fn offset(self) -> f64 {
        match self {
            Station::Left => 0.0,
            Station::Mid => 0.5,
            Station::Right => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub nodes: Vec<DVector<f64>>,
    pub mids: Vec<DVector<f64>>,
    /// Chart velocity f(t, x, u_i) at the three stations of interval i.
    pub velocities: Vec<[DVector<f64>; 3]>,
    pub control: ControlSignal,
}

impl Trajectory {
    pub fn cells(&self) -> usize {
        self.mids.len()
    }

    pub fn step(&self) -> f64 {
        self.control.step()
    }

    pub fn station_point(&self, i: usize, s: Station) -> &DVector<f64> {
        match s {
            Station::Left => &self.nodes[i],
            Station::Mid => &self.mids[i],
            Station::Right => &self.nodes[i + 1],
        }
    }

    pub fn station_time(&self, i: usize, s: Station) -> f64 {
        self.times[i] + s.offset() * self.step()
    }

    pub fn final_point(&self) -> &DVector<f64> {
        self.nodes.last().expect("trajectory has nodes")
    }

    /// Rows `t, x1..xn, u1..um`; the last node repeats the last control value.
    pub fn csv_rows(&self) -> Vec<Vec<f64>> {
        self.times
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let u = &self.control.values[i.min(self.cells() - 1)];
                std::iter::once(*t)
                    .chain(self.nodes[i].iter().copied())
                    .chain(u.iter().copied())
                    .collect()
            })
            .collect()
    }

    /// Half-interval Hermite segments (two per cell).
    pub fn half_segments(&self, i: usize) -> [Segment; 2] {
        let h = self.step();
        let t0 = self.times[i];
        let v = &self.velocities[i];
        [
            Segment {
                t0,
                t1: t0 + 0.5 * h,
                p0: self.nodes[i].clone(),
                p1: self.mids[i].clone(),
                v0: v[0].clone(),
                v1: v[1].clone(),
            },
            Segment {
                t0: t0 + 0.5 * h,
                t1: t0 + h,
                p0: self.mids[i].clone(),
                p1: self.nodes[i + 1].clone(),
                v0: v[1].clone(),
                v1: v[2].clone(),
            },
        ]
    }
}

fn eval_f(p: &ControlProblem, t: f64, x: &DVector<f64>, u: &[f64]) -> Result<DVector<f64>, TrajectoryError> {
    let v = DVector::from_vec(p.f(t, x.as_slice(), u));
    if v.iter().any(|a| !a.is_finite()) {
        return Err(TrajectoryError::NonFinite { time: t });
    }
    Ok(v)
}

/// One classical RK4 step of ẋ = f(t, x, u) with constant u.
pub fn rk4_step(
    p: &ControlProblem,
    t: f64,
    x: &DVector<f64>,
    u: &[f64],
    h: f64,
) -> Result<DVector<f64>, TrajectoryError> {
    let k1 = eval_f(p, t, x, u)?;
    let k2 = eval_f(p, t + 0.5 * h, &(x + &k1 * (0.5 * h)), u)?;
    let k3 = eval_f(p, t + 0.5 * h, &(x + &k2 * (0.5 * h)), u)?;
    let k4 = eval_f(p, t + h, &(x + &k3 * h), u)?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0))
}

/// RK4 on the control grid with per-cell constant control.
pub fn integrate_state(
    p: &ControlProblem,
    x0: &[f64],
    u: &ControlSignal,
) -> Result<Trajectory, TrajectoryError> {
    if x0.len() != p.n {
        return Err(ProblemError::new(
            crate::problem::ReasonCode::DimensionMismatch,
            format!("initial point has length {}, n = {}", x0.len(), p.n),
        )
        .into());
    }
    let domain = &p.manifold.domain;
    if !domain.contains(x0) {
        return Err(GeometryError::OutsideDomain { coords: x0.to_vec() }.into());
    }
    let cells = u.cells();
    let h = u.step();
    let times = u.times();
    let mut nodes = Vec::with_capacity(cells + 1);
    let mut mids = Vec::with_capacity(cells);
    let mut velocities = Vec::with_capacity(cells);
    let mut x = DVector::from_column_slice(x0);
    nodes.push(x.clone());
    for i in 0..cells {
        let t = times[i];
        let ui = &u.values[i];
        let mid = rk4_step(p, t, &x, ui, 0.5 * h)?;
        let next = rk4_step(p, t, &x, ui, h)?;
        for (pt, tt) in [(&mid, t + 0.5 * h), (&next, t + h)] {
            if !domain.contains(pt.as_slice()) {
                return Err(TrajectoryError::DomainExit {
                    time: tt,
                    coords: pt.as_slice().to_vec(),
                });
            }
        }
        velocities.push([
            eval_f(p, t, &x, ui)?,
            eval_f(p, t + 0.5 * h, &mid, ui)?,
            eval_f(p, t + h, &next, ui)?,
        ]);
        mids.push(mid);
        nodes.push(next.clone());
        x = next;
    }
    Ok(Trajectory {
        times,
        nodes,
        mids,
        velocities,
        control: u.clone(),
    })
}

/// Parallel orthonormal frame: columns of `nodes[i]` are e_1..e_n at t_i.
#[derive(Debug, Clone)]
pub struct FrameField {
    pub nodes: Vec<DMatrix<f64>>,
    pub mids: Vec<DMatrix<f64>>,
    pub dual_nodes: Vec<DMatrix<f64>>,
    pub dual_mids: Vec<DMatrix<f64>>,
}

impl FrameField {
    pub fn station(&self, i: usize, s: Station) -> (&DMatrix<f64>, &DMatrix<f64>) {
        match s {
            Station::Left => (&self.nodes[i], &self.dual_nodes[i]),
            Station::Mid => (&self.mids[i], &self.dual_mids[i]),
            Station::Right => (&self.nodes[i + 1], &self.dual_nodes[i + 1]),
        }
    }

    /// max over nodes of |EᵀgE − I|.
    pub fn orthonormality_error(&self, model: &ManifoldModel, traj: &Trajectory) -> Result<f64, GeometryError> {
        let mut worst: f64 = 0.0;
        for (e, x) in self.nodes.iter().zip(&traj.nodes) {
            let g = model.metric(x.as_slice())?;
            let gram = e.transpose() * g * e;
            worst = worst.max((gram - DMatrix::identity(e.nrows(), e.nrows())).abs().max());
        }
        Ok(worst)
    }

    /// max over nodes of |D E − I|.
    pub fn duality_error(&self) -> f64 {
        self.nodes
            .iter()
            .zip(&self.dual_nodes)
            .map(|(e, d)| (d * e - DMatrix::identity(e.nrows(), e.nrows())).abs().max())
            .fold(0.0, f64::max)
    }
}

fn invert(m: &DMatrix<f64>, x: &DVector<f64>) -> Result<DMatrix<f64>, GeometryError> {
    m.clone().try_inverse().ok_or(GeometryError::NotPositiveDefinite {
        coords: x.as_slice().to_vec(),
    })
}

/// Transports a seed basis along the trajectory. The default seed is
/// Gram–Schmidt of the chart axes under g at x̄(0).
pub fn build_frame(
    model: &ManifoldModel,
    traj: &Trajectory,
    seed: Option<&DMatrix<f64>>,
) -> Result<FrameField, TrajectoryError> {
    let x0 = &traj.nodes[0];
    let e0 = match seed {
        Some(s) => {
            let g = model.metric(x0.as_slice())?;
            let err = (s.transpose() * &g * s - DMatrix::identity(s.nrows(), s.nrows()))
                .abs()
                .max();
            if err > 1e-9 {
                return Err(TrajectoryError::SeedBasis(err));
            }
            s.clone()
        }
        None => {
            let g = model.metric(x0.as_slice())?;
            gram_schmidt(&g, &DMatrix::identity(model.dim(), model.dim()))?
        }
    };
    let mut nodes = Vec::with_capacity(traj.cells() + 1);
    let mut mids = Vec::with_capacity(traj.cells());
    nodes.push(e0.clone());
    let mut cur = e0;
    for i in 0..traj.cells() {
        let [s1, s2] = traj.half_segments(i);
        let mid = model.transport_step(&s1, &cur);
        let next = model.transport_step(&s2, &mid);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite {
                coords: traj.nodes[i + 1].as_slice().to_vec(),
            }
            .into());
        }
        mids.push(mid);
        nodes.push(next.clone());
        cur = next;
    }
    let dual_nodes = nodes
        .iter()
        .zip(&traj.nodes)
        .map(|(e, x)| invert(e, x))
        .collect::<Result<Vec<_>, _>>()?;
    let dual_mids = mids
        .iter()
        .zip(&traj.mids)
        .map(|(e, x)| invert(e, x))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(FrameField {
        nodes,
        mids,
        dual_nodes,
        dual_mids,
    })
}

/// Frame-coordinate data at one station for the reference control.
#[derive(Debug, Clone)]
pub struct StationData {
    pub t: f64,
    pub x: DVector<f64>,
    pub e: DMatrix<f64>,
    pub d: DMatrix<f64>,
    pub christoffel: Christoffel,
    pub dchristoffel: Vec<Christoffel>,
    /// A(t, ū) in the frame.
    pub a: DMatrix<f64>,
    /// f⃗(t, ū).
    pub fvec: DVector<f64>,
    /// B[k](ξ, ζ), symmetrised in (ξ, ζ).
    pub b: Vec<DMatrix<f64>>,
    /// Curvature in frame components.
    pub riemann: Riemann,
    /// Reference control value used at this station.
    pub u: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FrameData {
    pub step: f64,
    pub intervals: Vec<[StationData; 3]>,
}

impl FrameData {
    pub fn cells(&self) -> usize {
        self.intervals.len()
    }

    pub fn station(&self, i: usize, s: Station) -> &StationData {
        &self.intervals[i][s as usize]
    }

    pub fn n(&self) -> usize {
        self.intervals[0][0].fvec.len()
    }
}

/// A, f⃗ and B at a station for an arbitrary control value.
#[derive(Debug, Clone)]
pub struct Coefficients {
    pub a: DMatrix<f64>,
    pub fvec: DVector<f64>,
    pub b: Vec<DMatrix<f64>>,
}

/// Chart form of ∇f: T^k_j = ∂_j f^k + Γ^k_{jl} f^l.
fn covariant_jacobian(c: &Christoffel, jac: &[Vec<f64>], f: &[f64]) -> DMatrix<f64> {
    let n = f.len();
    DMatrix::from_fn(n, n, |k, j| {
        jac[k][j] + (0..n).map(|l| c.get(k, j, l) * f[l]).sum::<f64>()
    })
}

/// A(t,u) and f⃗(t,u) at a station.
pub fn station_a_f(p: &ControlProblem, st: &StationData, u: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let x = st.x.as_slice();
    let f = p.f(st.t, x, u);
    let jac = p.jacobian(st.t, x, u);
    let tc = covariant_jacobian(&st.christoffel, &jac, &f);
    let a = &st.d * tc * &st.e;
    let fvec = &st.d * DVector::from_vec(f);
    (a, fvec)
}

/// f⃗(t,u) only.
pub fn station_f(p: &ControlProblem, st: &StationData, u: &[f64]) -> DVector<f64> {
    &st.d * DVector::from_vec(p.f(st.t, st.x.as_slice(), u))
}

/// Second covariant derivative of f in the frame, symmetrised in the last two slots.
fn second_covariant(
    p: &ControlProblem,
    t: f64,
    x: &[f64],
    u: &[f64],
    c: &Christoffel,
    dc: &[Christoffel],
    e: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> Vec<DMatrix<f64>> {
    let n = x.len();
    let f = p.f(t, x, u);
    let jac = p.jacobian(t, x, u);
    let hess: Vec<Vec<Vec<f64>>> = p.dynamics.iter().map(|ex| ex.hessian_state(x, u, t)).collect();
    let tc = covariant_jacobian(c, &jac, &f);
    // cov[k][(j, i)] = (∇_i T)^k_j
    let mut cov = vec![DMatrix::zeros(n, n); n];
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let mut v = hess[k][i][j];
                for l in 0..n {
                    v += dc[i].get(k, j, l) * f[l] + c.get(k, j, l) * jac[l][i];
                }
                for m in 0..n {
                    v += c.get(k, i, m) * tc[(m, j)] - c.get(m, i, j) * tc[(k, m)];
                }
                cov[k][(j, i)] = v;
            }
        }
    }
    (0..n)
        .map(|a| {
            let mut s = DMatrix::zeros(n, n);
            for k in 0..n {
                if d[(a, k)] != 0.0 {
                    s += &cov[k] * d[(a, k)];
                }
            }
            let framed = e.transpose() * s * e;
            (&framed + framed.transpose()) * 0.5
        })
        .collect()
}

/// A, f⃗ and B at a station for any control value.
pub fn frame_coefficients(p: &ControlProblem, st: &StationData, u: &[f64]) -> Coefficients {
    let (a, fvec) = station_a_f(p, st, u);
    let b = second_covariant(p, st.t, st.x.as_slice(), u, &st.christoffel, &st.dchristoffel, &st.e, &st.d);
    Coefficients { a, fvec, b }
}

/// Frame data along the reference for every station.
pub fn frame_data(
    p: &ControlProblem,
    traj: &Trajectory,
    frame: &FrameField,
    exec: Execution,
) -> Result<FrameData, TrajectoryError> {
    let model = &p.manifold;
    let intervals = exec.try_map_range(traj.cells(), |i| -> Result<[StationData; 3], TrajectoryError> {
        let u = &traj.control.values[i];
        let make = |s: Station| -> Result<StationData, TrajectoryError> {
            let x = traj.station_point(i, s).clone();
            let t = traj.station_time(i, s);
            let (e, d) = frame.station(i, s);
            let cd = model.connection_data(x.as_slice())?;
            let mut st = StationData {
                t,
                x,
                e: e.clone(),
                d: d.clone(),
                christoffel: cd.christoffel,
                dchristoffel: cd.dchristoffel,
                a: DMatrix::zeros(0, 0),
                fvec: DVector::zeros(0),
                b: Vec::new(),
                riemann: cd.riemann.in_basis(e),
                u: u.clone(),
            };
            let co = frame_coefficients(p, &st, u);
            st.a = co.a;
            st.fvec = co.fvec;
            st.b = co.b;
            Ok(st)
        };
        Ok([make(Station::Left)?, make(Station::Mid)?, make(Station::Right)?])
    })?;
    Ok(FrameData {
        step: traj.step(),
        intervals,
    })
}

/// Values of a vector field along the grid: nodes and interval midpoints.
#[derive(Debug, Clone)]
pub struct LinearPath {
    pub nodes: Vec<DVector<f64>>,
    pub mids: Vec<DVector<f64>>,
}

impl LinearPath {
    pub fn station(&self, i: usize, s: Station) -> &DVector<f64> {
        match s {
            Station::Left => &self.nodes[i],
            Station::Mid => &self.mids[i],
            Station::Right => &self.nodes[i + 1],
        }
    }

    pub fn last(&self) -> &DVector<f64> {
        self.nodes.last().expect("path has nodes")
    }

    pub fn sup_distance(&self, other: &LinearPath) -> f64 {
        self.nodes
            .iter()
            .zip(&other.nodes)
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max)
    }

    pub fn zeros(cells: usize, n: usize) -> Self {
        Self {
            nodes: vec![DVector::zeros(n); cells + 1],
            mids: vec![DVector::zeros(n); cells],
        }
    }
}

/// Cubic Hermite midpoint from end values and derivatives.
#[inline]
pub fn hermite_mid<T>(y0: &T, y1: &T, d0: &T, d1: &T, h: f64) -> T
where
    for<'a> &'a T: std::ops::Add<&'a T, Output = T> + std::ops::Sub<&'a T, Output = T>,
    T: std::ops::Mul<f64, Output = T> + std::ops::Add<T, Output = T>,
{
    (y0 + y1) * 0.5 + (d0 - d1) * (h / 8.0)
}

/// Simpson's rule on one cell from the three station values.
#[inline]
pub fn simpson(h: f64, l: f64, m: f64, r: f64) -> f64 {
    h / 6.0 * (l + 4.0 * m + r)
}

/// Forward RK4 of ẏ = A(t, ū) y + b(t), with b given at stations.
pub fn forward_linear(
    fd: &FrameData,
    y0: &DVector<f64>,
    drive: &dyn Fn(usize, Station) -> DVector<f64>,
) -> LinearPath {
    let h = fd.step;
    let mut nodes = Vec::with_capacity(fd.cells() + 1);
    let mut mids = Vec::with_capacity(fd.cells());
    let mut y = y0.clone();
    nodes.push(y.clone());
    for i in 0..fd.cells() {
        let [l, m, r] = &fd.intervals[i];
        let bl = drive(i, Station::Left);
        let bm = drive(i, Station::Mid);
        let br = drive(i, Station::Right);
        let k1 = &l.a * &y + &bl;
        let k2 = &m.a * (&y + &k1 * (0.5 * h)) + &bm;
        let k3 = &m.a * (&y + &k2 * (0.5 * h)) + &bm;
        let k4 = &r.a * (&y + &k3 * h) + &br;
        let next = &y + (&k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let d1 = &r.a * &next + &br;
        mids.push(hermite_mid(&y, &next, &k1, &d1, h));
        nodes.push(next.clone());
        y = next;
    }
    LinearPath { nodes, mids }
}

/// Backward RK4 of the row equation ṗ = −p A(t, ū) − c(t) from p(T).
pub fn backward_costate(
    fd: &FrameData,
    p_t: &DVector<f64>,
    extra: Option<&dyn Fn(usize, Station) -> DVector<f64>>,
) -> LinearPath {
    let h = fd.step;
    let n = p_t.len();
    let cells = fd.cells();
    let mut nodes = vec![DVector::zeros(n); cells + 1];
    let mut mids = vec![DVector::zeros(n); cells];
    let mut y = p_t.clone();
    nodes[cells] = y.clone();
    let c = |i: usize, s: Station| extra.map_or_else(|| DVector::zeros(n), |f| f(i, s));
    let rhs = |a: &DMatrix<f64>, y: &DVector<f64>, c: &DVector<f64>| -(a.transpose() * y) - c;
    for i in (0..cells).rev() {
        let [l, m, r] = &fd.intervals[i];
        let (cl, cm, cr) = (c(i, Station::Left), c(i, Station::Mid), c(i, Station::Right));
        let k1 = rhs(&r.a, &y, &cr);
        let k2 = rhs(&m.a, &(&y - &k1 * (0.5 * h)), &cm);
        let k3 = rhs(&m.a, &(&y - &k2 * (0.5 * h)), &cm);
        let k4 = rhs(&l.a, &(&y - &k3 * h), &cl);
        let prev = &y - (&k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let d0 = rhs(&l.a, &prev, &cl);
        mids[i] = hermite_mid(&prev, &y, &d0, &k1, h);
        nodes[i] = prev.clone();
        y = prev;
    }
    LinearPath { nodes, mids }
}

/// Z with Ż = −Z A(t, ū), Z(0) = I, and Z⁻¹ propagated by d/dt Z⁻¹ = A Z⁻¹.
#[derive(Debug, Clone)]
pub struct Fundamental {
    pub z: Vec<DMatrix<f64>>,
    pub z_mid: Vec<DMatrix<f64>>,
    pub zinv: Vec<DMatrix<f64>>,
    pub zinv_mid: Vec<DMatrix<f64>>,
    pub max_condition: f64,
    /// Set when cond(Z) exceeds 1e8 somewhere.
    pub ill_conditioned: bool,
}

impl Fundamental {
    pub fn station(&self, i: usize, s: Station) -> (&DMatrix<f64>, &DMatrix<f64>) {
        match s {
            Station::Left => (&self.z[i], &self.zinv[i]),
            Station::Mid => (&self.z_mid[i], &self.zinv_mid[i]),
            Station::Right => (&self.z[i + 1], &self.zinv[i + 1]),
        }
    }

    /// max_t |Z Z⁻¹ − I|.
    pub fn consistency_error(&self) -> f64 {
        self.z
            .iter()
            .zip(&self.zinv)
            .map(|(a, b)| (a * b - DMatrix::identity(a.nrows(), a.nrows())).abs().max())
            .fold(0.0, f64::max)
    }

    /// Z at an arbitrary time by Hermite interpolation inside its cell.
    pub fn z_at(&self, fd: &FrameData, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let h = fd.step;
        let cells = fd.cells();
        let i = ((t / h).floor() as usize).min(cells - 1);
        let s = ((t - i as f64 * h) / h).clamp(0.0, 1.0);
        let [l, _, r] = &fd.intervals[i];
        let herm = |y0: &DMatrix<f64>, y1: &DMatrix<f64>, d0: DMatrix<f64>, d1: DMatrix<f64>| {
            let s2 = s * s;
            let s3 = s2 * s;
            y0 * (2.0 * s3 - 3.0 * s2 + 1.0)
                + d0 * ((s3 - 2.0 * s2 + s) * h)
                + y1 * (-2.0 * s3 + 3.0 * s2)
                + d1 * ((s3 - s2) * h)
        };
        let z = herm(&self.z[i], &self.z[i + 1], -(&self.z[i] * &l.a), -(&self.z[i + 1] * &r.a));
        let zi = herm(&self.zinv[i], &self.zinv[i + 1], &l.a * &self.zinv[i], &r.a * &self.zinv[i + 1]);
        (z, zi)
    }
}

pub fn fundamental_matrix(fd: &FrameData) -> Fundamental {
    let n = fd.n();
    let h = fd.step;
    let cells = fd.cells();
    let id = DMatrix::<f64>::identity(n, n);
    let mut z = vec![id.clone()];
    let mut zi = vec![id.clone()];
    let mut z_mid = Vec::with_capacity(cells);
    let mut zi_mid = Vec::with_capacity(cells);
    let mut cz = id.clone();
    let mut ci = id;
    let mut max_cond: f64 = 1.0;
    for i in 0..cells {
        let [l, m, r] = &fd.intervals[i];
        // Ż = −Z A
        let k1 = -(&cz * &l.a);
        let k2 = -((&cz + &k1 * (0.5 * h)) * &m.a);
        let k3 = -((&cz + &k2 * (0.5 * h)) * &m.a);
        let k4 = -((&cz + &k3 * h) * &r.a);
        let nz = &cz + (&k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        let d1 = -(&nz * &r.a);
        z_mid.push(hermite_mid(&cz, &nz, &k1, &d1, h));
        // d/dt Z⁻¹ = A Z⁻¹
        let j1 = &l.a * &ci;
        let j2 = &m.a * (&ci + &j1 * (0.5 * h));
        let j3 = &m.a * (&ci + &j2 * (0.5 * h));
        let j4 = &r.a * (&ci + &j3 * h);
        let ni = &ci + (&j1 + j2 * 2.0 + j3 * 2.0 + j4) * (h / 6.0);
        let e1 = &r.a * &ni;
        zi_mid.push(hermite_mid(&ci, &ni, &j1, &e1, h));
        max_cond = max_cond.max(condition_number(&nz));
        z.push(nz.clone());
        zi.push(ni.clone());
        cz = nz;
        ci = ni;
    }
    Fundamental {
        z,
        z_mid,
        zinv: zi,
        zinv_mid: zi_mid,
        max_condition: max_cond,
        ill_conditioned: max_cond > 1e8,
    }
}

fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.max();
    let min = sv.min();
    if min > 0.0 {
        max / min
    } else {
        f64::INFINITY
    }
}

/// Everything downstream needs about the reference pair.
#[derive(Debug, Clone)]
pub struct ReferenceData {
    pub traj: Trajectory,
    pub frame: FrameField,
    pub fd: FrameData,
    pub z: Fundamental,
}

impl ReferenceData {
    pub fn build(p: &ControlProblem, x0: &[f64], u: &ControlSignal, exec: Execution) -> Result<Self, TrajectoryError> {
        p.check_signal(u)?;
        let traj = integrate_state(p, x0, u)?;
        let frame = build_frame(&p.manifold, &traj, None)?;
        let fd = frame_data(p, &traj, &frame, exec)?;
        let z = fundamental_matrix(&fd);
        Ok(Self { traj, frame, fd, z })
    }

    /// Builds from the problem's own reference section.
    pub fn from_problem(p: &ControlProblem, exec: Execution) -> Result<Self, TrajectoryError> {
        let r = p.reference.as_ref().ok_or_else(|| {
            ProblemError::new(crate::problem::ReasonCode::MissingKey, "problem has no [reference] section")
        })?;
        Self::build(p, &r.x0, &r.control, exec)
    }

    pub fn cells(&self) -> usize {
        self.fd.cells()
    }

    pub fn step(&self) -> f64 {
        self.fd.step
    }

    pub fn e0(&self) -> &DMatrix<f64> {
        &self.frame.nodes[0]
    }

    pub fn e_t(&self) -> &DMatrix<f64> {
        self.frame.nodes.last().unwrap()
    }

    /// Frame coordinates of a chart tangent vector at x̄(0).
    pub fn frame_coords0(&self, v: &[f64]) -> DVector<f64> {
        &self.frame.dual_nodes[0] * DVector::from_column_slice(v)
    }
}

/// max over stations of |∇_ẋ ẋ| for the reference, in the frame (a geodesic has 0).
pub fn geodesic_residual(p: &ControlProblem, fd: &FrameData) -> f64 {
    let ht = 1e-6;
    let mut worst: f64 = 0.0;
    for iv in &fd.intervals {
        for st in iv {
            let x = st.x.as_slice();
            let fp = DVector::from_vec(p.f(st.t + ht, x, &st.u));
            let fm = DVector::from_vec(p.f(st.t - ht, x, &st.u));
            let dt = &st.d * (fp - fm) / (2.0 * ht);
            let acc = &st.a * &st.fvec + dt;
            worst = worst.max(acc.norm());
        }
    }
    worst
}
