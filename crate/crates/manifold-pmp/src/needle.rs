//! Needle-variation experiments: build u_ν^ε on a refined grid, integrate the
//! perturbed trajectory and measure how well εX + ε²Y predicts it.

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::endpoint::EndpointJets;
use crate::geometry::{ChartPoint, GeometryError, TangentVector};
use crate::liapounoff::{partition_running, select_running, CellVectors, GridSubset, LiapounoffError};
use crate::par::Execution;
use crate::problem::{ControlProblem, ControlSignal, DirectionSpec};
use crate::trajectory::{rk4_step, LinearPath, ReferenceData, Station, TrajectoryError};
use crate::variations::{solve_linearized_with, solve_second_variation_with, DirectionData, EndpointRow};

pub const DEFAULT_EPS: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
/// Target size of the needle grid when `refine` is 0.
pub const DEFAULT_FINE_CELLS: usize = 1 << 21;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NeedleError {
    #[error("epsilon {eps} is below the needle grid resolution: {what}")]
    BelowResolution { eps: f64, what: String },
    #[error("log map failed at t = {time} for epsilon {eps}: {source}")]
    LogMap { eps: f64, time: f64, source: GeometryError },
    #[error("exp map failed for epsilon {eps}: {source}")]
    ExpMap { eps: f64, source: GeometryError },
    #[error("perturbed trajectory failed for epsilon {eps}: {source}")]
    Trajectory { eps: f64, source: TrajectoryError },
    #[error("invalid needle configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Liapounoff(#[from] LiapounoffError),
    #[error("convergence order needs at least 3 samples with positive defect")]
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleTerm {
    pub sigma: ControlSignal,
    pub lambda: f64,
    /// W in chart components at x̄(0).
    pub w: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleConfig {
    pub direction: ControlSignal,
    pub v: Vec<f64>,
    pub terms: Vec<NeedleTerm>,
    pub nu: Vec<f64>,
    pub eps: Vec<f64>,
    /// Needle cells per reference cell; 0 picks about `DEFAULT_FINE_CELLS` in total.
    pub refine: usize,
}

impl NeedleConfig {
    pub fn first_order(direction: ControlSignal, v: Vec<f64>) -> Self {
        Self {
            direction,
            v,
            terms: Vec::new(),
            nu: Vec::new(),
            eps: DEFAULT_EPS.to_vec(),
            refine: 0,
        }
    }

    pub fn from_direction(d: &DirectionSpec) -> Self {
        let mut cfg = Self::first_order(d.control.clone(), d.v.clone());
        if let Some(so) = &d.second_order {
            cfg.terms = so
                .sigma
                .iter()
                .zip(&so.lambda)
                .zip(&so.w)
                .map(|((s, l), w)| NeedleTerm {
                    sigma: s.clone(),
                    lambda: *l,
                    w: w.clone(),
                })
                .collect();
            cfg.nu = so.nu.clone();
        }
        cfg
    }
}

/// The needle sets for one ε, on the refined grid.
#[derive(Debug, Clone)]
pub struct NeedleSets {
    pub e: GridSubset,
    pub f: GridSubset,
    /// E_ν^η, a partition of the grid.
    pub groups: Vec<GridSubset>,
    pub e_residual: f64,
    pub f_residual: f64,
    pub group_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeedleSample {
    pub eps: f64,
    /// sup over reference nodes of |V^ε − εX|.
    pub first_defect: f64,
    /// sup over reference nodes of |V^ε − εX − ε²ΣνY|.
    pub second_defect: f64,
    /// Endpoint expansion defects for φ_0..φ_j then ψ_1..ψ_k.
    pub endpoint_defects: Vec<f64>,
    /// First-order endpoint coefficients recovered from the data: (φ(x^ε) − φ̄)/ε.
    pub endpoint_quotients: Vec<f64>,
    pub changed_measure: f64,
    pub e_measure: f64,
    pub f_measure: f64,
    pub set_residuals: [f64; 3],
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Cell {
    Base,
    Direction,
    Sigma(usize),
}

/// Prepared needle experiment for a problem, reference and configuration.
pub struct NeedleLab<'a> {
    pub problem: &'a ControlProblem,
    pub reference: &'a ReferenceData,
    pub config: NeedleConfig,
    pub x: LinearPath,
    pub y: LinearPath,
    jets: EndpointJets,
    v_frame: DVector<f64>,
    w_frame: DVector<f64>,
    w_chart: Vec<f64>,
    lambda1: f64,
    fine_cells: usize,
    fine_width: f64,
    g_u: CellVectors,
    g_u_x: CellVectors,
    g_hat: Vec<CellVectors>,
    a_sets: Vec<GridSubset>,
    /// x̄ on the refined grid, sampled at reference nodes.
    xbar: Vec<DVector<f64>>,
}

fn midpoint_field(cells: usize, dim: usize, f: impl Fn(usize) -> DVector<f64>) -> CellVectors {
    CellVectors::from_fn(cells, dim, |i, row| row.copy_from_slice(f(i).as_slice()))
}

impl<'a> NeedleLab<'a> {
    pub fn new(
        problem: &'a ControlProblem,
        reference: &'a ReferenceData,
        mut config: NeedleConfig,
        exec: Execution,
    ) -> Result<Self, NeedleError> {
        let p = problem;
        let rd = reference;
        let n = p.n;
        let cells = rd.cells();
        if config.refine == 0 {
            config.refine = DEFAULT_FINE_CELLS.div_ceil(cells).max(1);
        }
        if config.v.len() != n {
            return Err(NeedleError::Config(format!("V has length {}, n = {n}", config.v.len())));
        }
        p.check_signal(&config.direction).map_err(|e| NeedleError::Config(e.to_string()))?;
        if config.eps.iter().any(|e| !(*e >= 0.0 && *e <= 1.0)) {
            return Err(NeedleError::Config("epsilon values must lie in [0, 1]".into()));
        }
        let q = config.terms.len();
        if q > 0 {
            if config.nu.len() != q {
                return Err(NeedleError::Config(format!("{} weights for {q} second-order terms", config.nu.len())));
            }
            let s: f64 = config.nu.iter().sum();
            if config.nu.iter().any(|v| *v < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(NeedleError::Config("nu must lie on the simplex".into()));
            }
            for t in &config.terms {
                if !(t.lambda > 0.0) || t.w.len() != n {
                    return Err(NeedleError::Config("each term needs lambda > 0 and W of length n".into()));
                }
                p.check_signal(&t.sigma).map_err(|e| NeedleError::Config(e.to_string()))?;
            }
            // λ₁ is the largest λ.
            let k = (0..q).max_by(|a, b| config.terms[*a].lambda.total_cmp(&config.terms[*b].lambda).then(b.cmp(a))).unwrap();
            config.terms.swap(0, k);
            config.nu.swap(0, k);
        }

        let dd = DirectionData::new(p, rd, &config.direction, exec);
        let v_frame = rd.frame_coords0(&config.v);
        let x = solve_linearized_with(rd, &dd, &v_frame);
        let dds: Vec<DirectionData> = config.terms.iter().map(|t| DirectionData::new(p, rd, &t.sigma, exec)).collect();
        let mut w_chart = vec![0.0; n];
        for (t, nu) in config.terms.iter().zip(&config.nu) {
            for (a, b) in w_chart.iter_mut().zip(&t.w) {
                *a += nu * b;
            }
        }
        let w_frame = rd.frame_coords0(&w_chart);
        let pairs: Vec<(&DirectionData, f64)> = dds.iter().zip(config.terms.iter().zip(&config.nu)).map(|(d, (t, nu))| (d, t.lambda * nu)).collect();
        let y = solve_second_variation_with(rd, &dd, &x, &pairs, &w_frame);

        let r = config.refine;
        let fine_cells = cells * r;
        let fine_width = rd.step() / r as f64;
        let g_u = midpoint_field(cells, n, |i| dd.df(i, Station::Mid).clone()).refined(r);
        let g_u_x = midpoint_field(cells, n, |i| dd.da(i, Station::Mid) * x.station(i, Station::Mid)).refined(r);
        let lambda1 = config.terms.first().map_or(0.0, |t| t.lambda);
        let mut a_sets = Vec::with_capacity(q);
        let mut g_hat = Vec::with_capacity(q);
        for (eta, d) in dds.iter().enumerate() {
            let g = midpoint_field(cells, n, |i| d.df(i, Station::Mid).clone()).refined(r);
            let a = if eta == 0 {
                GridSubset::full(fine_cells, fine_width)
            } else {
                let rho = config.terms[eta].lambda / lambda1;
                select_running(&g, rho, (rho * fine_cells as f64).round() as usize, fine_width).subset
            };
            g_hat.push(g.masked(&a.mask));
            a_sets.push(a);
        }

        let xbar = integrate_sampled(p, &rd.traj.nodes[0], &|c| &rd.traj.control.values[c / r], fine_cells, fine_width, r)
            .map_err(|source| NeedleError::Trajectory { eps: 0.0, source })?;
        Ok(Self {
            problem,
            reference,
            jets: EndpointJets::at_reference(p, rd),
            config,
            x,
            y,
            v_frame,
            w_frame,
            w_chart,
            lambda1,
            fine_cells,
            fine_width,
            g_u,
            g_u_x,
            g_hat,
            a_sets,
            xbar,
        })
    }

    pub fn fine_cells(&self) -> usize {
        self.fine_cells
    }

    pub fn fine_width(&self) -> f64 {
        self.fine_width
    }

    /// E_ε, F_ε and the E_ν partition for one ε.
    pub fn sets(&self, eps: f64) -> Result<NeedleSets, NeedleError> {
        let n = self.fine_cells;
        let w = self.fine_width;
        let q = self.config.terms.len();
        if eps == 0.0 {
            let empty = GridSubset::empty(n, w);
            let mut groups = vec![GridSubset::full(n, w)];
            groups.extend((1..q).map(|_| GridSubset::empty(n, w)));
            return Ok(NeedleSets {
                e: empty.clone(),
                f: empty,
                groups,
                e_residual: 0.0,
                f_residual: 0.0,
                group_residual: 0.0,
            });
        }
        let e_count = (eps * n as f64).round() as usize;
        if e_count == 0 {
            return Err(NeedleError::BelowResolution {
                eps,
                what: "E has no cells".into(),
            });
        }
        let (f, f_residual) = if q > 0 {
            let rho = self.lambda1 * eps * eps;
            let f_count = (rho * n as f64).round() as usize;
            if f_count == 0 {
                return Err(NeedleError::BelowResolution {
                    eps,
                    what: "F has no cells".into(),
                });
            }
            let mut parts: Vec<&CellVectors> = self.g_hat.iter().collect();
            parts.push(&self.g_u);
            let h = CellVectors::stack(&parts)?;
            let s = select_running(&h, rho, f_count, w);
            (s.subset, s.sup_residual)
        } else {
            (GridSubset::empty(n, w), 0.0)
        };
        let keep = f.complement();
        let h_e = CellVectors::stack(&[&self.g_u, &self.g_u_x])?.masked(&keep.mask);
        let e = select_running(&h_e, eps, e_count, w);
        let (groups, group_residual) = if q > 0 {
            let masked: Vec<CellVectors> = self.g_hat.iter().map(|g| g.masked(&f.mask)).collect();
            let refs: Vec<&CellVectors> = masked.iter().collect();
            let part = partition_running(&refs, &self.config.nu, w)?;
            (part.subsets, part.sup_residual.unwrap_or(part.residual))
        } else {
            (Vec::new(), 0.0)
        };
        Ok(NeedleSets {
            e: e.subset,
            f,
            groups,
            e_residual: e.sup_residual,
            f_residual,
            group_residual,
        })
    }

    fn cell_codes(&self, sets: &NeedleSets) -> Vec<Cell> {
        let mut owner = vec![usize::MAX; self.fine_cells];
        for (g, s) in sets.groups.iter().enumerate() {
            for (c, b) in s.mask.iter().enumerate() {
                if *b {
                    owner[c] = g;
                }
            }
        }
        (0..self.fine_cells)
            .map(|c| {
                if sets.f.contains(c) {
                    let g = owner[c];
                    if g != usize::MAX && self.a_sets[g].contains(c) {
                        Cell::Sigma(g)
                    } else {
                        Cell::Base
                    }
                } else if sets.e.contains(c) {
                    Cell::Direction
                } else {
                    Cell::Base
                }
            })
            .collect()
    }

    fn value_of(&self, code: Cell, c: usize) -> &[f64] {
        let i = c / self.config.refine;
        match code {
            Cell::Base => &self.reference.traj.control.values[i],
            Cell::Direction => &self.config.direction.values[i],
            Cell::Sigma(g) => &self.config.terms[g].sigma.values[i],
        }
    }

    /// u_ν^ε on the refined grid.
    pub fn build_needle_control(&self, eps: f64) -> Result<ControlSignal, NeedleError> {
        let sets = self.sets(eps)?;
        let codes = self.cell_codes(&sets);
        Ok(ControlSignal {
            horizon: self.problem.horizon,
            values: codes.iter().enumerate().map(|(c, k)| self.value_of(*k, c).to_vec()).collect(),
        })
    }

    /// exp_{x̄(0)}(εV + ε²ΣνW).
    pub fn initial_point(&self, eps: f64) -> Result<DVector<f64>, NeedleError> {
        let x0 = &self.reference.traj.nodes[0];
        if eps == 0.0 {
            return Ok(x0.clone());
        }
        let v: Vec<f64> = self.config.v.iter().zip(&self.w_chart).map(|(a, b)| eps * a + eps * eps * b).collect();
        let base = ChartPoint { coords: x0.clone() };
        self.problem
            .manifold
            .exp_map(&base, &TangentVector::new(base.clone(), v))
            .map(|p| p.coords)
            .map_err(|source| NeedleError::ExpMap { eps, source })
    }

    /// Runs one ε and measures every defect.
    pub fn sample(&self, eps: f64) -> Result<NeedleSample, NeedleError> {
        let sets = self.sets(eps)?;
        let codes = self.cell_codes(&sets);
        let x0 = self.initial_point(eps)?;
        let r = self.config.refine;
        let nodes = integrate_sampled(
            self.problem,
            &x0,
            &|c| self.value_of(codes[c], c),
            self.fine_cells,
            self.fine_width,
            r,
        )
        .map_err(|source| NeedleError::Trajectory { eps, source })?;
        let rd = self.reference;
        let model = &self.problem.manifold;
        let mut first: f64 = 0.0;
        let mut second: f64 = 0.0;
        for (i, (xe, xb)) in nodes.iter().zip(&self.xbar).enumerate() {
            let v = if xe == xb {
                DVector::zeros(xe.len())
            } else {
                let base = ChartPoint { coords: xb.clone() };
                let lv = model
                    .log_map(&base, &ChartPoint { coords: xe.clone() })
                    .map_err(|source| NeedleError::LogMap {
                        eps,
                        time: rd.traj.times[i],
                        source,
                    })?;
                &rd.frame.dual_nodes[i] * lv.comps
            };
            let (xi, yi) = (node_value(&self.x, i), node_value(&self.y, i));
            let d1 = &v - xi * eps;
            first = first.max(d1.norm());
            second = second.max((d1 - yi * (eps * eps)).norm());
        }
        let xt = nodes.last().unwrap();
        let args = ControlProblem::endpoint_args(x0.as_slice(), xt.as_slice());
        let x_t = self.x.last();
        let y_t = self.y.last();
        let p = self.problem;
        let rows: Vec<_> = p.phi.iter().zip(&self.jets.phi).chain(p.psi.iter().zip(&self.jets.psi)).collect();
        let mut endpoint_defects = Vec::with_capacity(rows.len());
        let mut endpoint_quotients = Vec::with_capacity(rows.len());
        for (e, jet) in rows {
            let val = e.eval(&args, &[], 0.0);
            let d = val - jet.value;
            let lin = jet.first(&self.v_frame, x_t);
            let quad = jet.first(&self.w_frame, y_t) + 0.5 * jet.second(&self.v_frame, x_t);
            endpoint_defects.push((d - eps * lin - eps * eps * quad).abs());
            endpoint_quotients.push(if eps > 0.0 { d / eps } else { 0.0 });
        }
        let changed = codes
            .iter()
            .enumerate()
            .filter(|(c, k)| self.value_of(**k, *c) != self.value_of(Cell::Base, *c))
            .count() as f64
            * self.fine_width;
        Ok(NeedleSample {
            eps,
            first_defect: first,
            second_defect: second,
            endpoint_defects,
            endpoint_quotients,
            changed_measure: changed,
            e_measure: sets.e.measure(),
            f_measure: sets.f.measure(),
            set_residuals: [sets.e_residual, sets.f_residual, sets.group_residual],
        })
    }

    /// sup-norm defect |V^ε − εX − ε²ΣνY|.
    pub fn variation_defect(&self, eps: f64) -> Result<f64, NeedleError> {
        Ok(self.sample(eps)?.second_defect)
    }

    pub fn endpoint_expansion_defect(&self, eps: f64, row: EndpointRow) -> Result<f64, NeedleError> {
        let s = self.sample(eps)?;
        let j1 = self.problem.phi.len();
        Ok(match row {
            EndpointRow::Phi(i) => s.endpoint_defects[i],
            EndpointRow::Psi(r) => s.endpoint_defects[j1 + r],
        })
    }

    /// All configured ε's, independently.
    pub fn sweep(&self, exec: Execution) -> Result<Vec<NeedleSample>, NeedleError> {
        exec.try_map_range(self.config.eps.len(), |k| self.sample(self.config.eps[k]))
    }
}

fn node_value(p: &LinearPath, i: usize) -> &DVector<f64> {
    &p.nodes[i]
}

/// RK4 over `cells` steps of width `h`, keeping every `every`-th node.
fn integrate_sampled<'c>(
    p: &ControlProblem,
    x0: &DVector<f64>,
    control: &dyn Fn(usize) -> &'c [f64],
    cells: usize,
    h: f64,
    every: usize,
) -> Result<Vec<DVector<f64>>, TrajectoryError> {
    let domain = &p.manifold.domain;
    let mut x = x0.clone();
    let mut out = Vec::with_capacity(cells / every + 1);
    out.push(x.clone());
    for c in 0..cells {
        let t = c as f64 * h;
        x = rk4_step(p, t, &x, control(c), h)?;
        if !domain.contains(x.as_slice()) {
            return Err(TrajectoryError::DomainExit {
                time: t + h,
                coords: x.as_slice().to_vec(),
            });
        }
        if (c + 1) % every == 0 {
            out.push(x.clone());
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "slope", rename_all = "lowercase")]
pub enum ConvergenceOrder {
    /// Every defect vanished.
    Exact,
    Slope(f64),
}

impl ConvergenceOrder {
    pub fn slope(self) -> Option<f64> {
        match self {
            ConvergenceOrder::Slope(s) => Some(s),
            ConvergenceOrder::Exact => None,
        }
    }
}

/// Least-squares slope of log(defect) against log(ε).
pub fn convergence_order(eps: &[f64], defects: &[f64]) -> Result<ConvergenceOrder, NeedleError> {
    if eps.len() != defects.len() {
        return Err(NeedleError::Config("epsilon and defect lists differ in length".into()));
    }
    if !defects.is_empty() && defects.iter().all(|d| *d == 0.0) {
        return Ok(ConvergenceOrder::Exact);
    }
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .zip(defects)
        .filter(|(e, d)| **e > 0.0 && **d > 1e-14)
        .map(|(e, d)| (e.ln(), d.ln()))
        .collect();
    if pts.len() < 3 || pts.len() != eps.len() {
        return Err(NeedleError::Degenerate);
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(NeedleError::Degenerate);
    }
    Ok(ConvergenceOrder::Slope(sxy / sxx))
}

/// CSV rows: ε, defect, slope over the samples so far (empty below three).
pub fn sweep_csv(samples: &[NeedleSample]) -> String {
    let mut out = String::from("eps,first_defect,second_defect,slope_so_far\n");
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|a, b| samples[*b].eps.total_cmp(&samples[*a].eps));
    let mut es = Vec::new();
    let mut ds = Vec::new();
    for k in order {
        let s = &samples[k];
        es.push(s.eps);
        ds.push(s.first_defect);
        let slope = match convergence_order(&es, &ds) {
            Ok(ConvergenceOrder::Slope(v)) => format!("{v:.6}"),
            Ok(ConvergenceOrder::Exact) => "exact".into(),
            Err(_) => String::new(),
        };
        out.push_str(&format!("{:e},{:e},{:e},{}\n", s.eps, s.first_defect, s.second_defect, slope));
    }
    out
}
