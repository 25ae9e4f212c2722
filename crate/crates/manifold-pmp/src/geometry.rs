//! Chart-based Riemannian geometry.
//!
//! A [`ManifoldModel`] lives in a single coordinate chart with a validity box.
//! Christoffel symbols come from closed forms for the built-in models and from
//! central differences of the metric otherwise; curvature uses one more level of
//! differences on top of the Christoffel symbols.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::expr::{parse_expression, Expr, ExprError, SymbolTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("point {coords:?} lies outside the chart domain")]
    OutsideDomain { coords: Vec<f64> },
    #[error("metric is not positive definite at {coords:?}")]
    NotPositiveDefinite { coords: Vec<f64> },
    #[error("path left the chart domain at parameter {time} (point {coords:?})")]
    DomainExit { time: f64, coords: Vec<f64> },
    #[error("non-finite value encountered at {coords:?}")]
    NonFinite { coords: Vec<f64> },
    #[error("shooting did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },
    #[error("points are {distance} apart in the chart, beyond the shooting radius {radius}")]
    BeyondShootingRadius { distance: f64, radius: f64 },
    #[error("tangent data based at different points")]
    BaseMismatch,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid metric specification: {0}")]
    Spec(String),
    #[error(transparent)]
    Expr(#[from] ExprError),
}

/// Non-fatal observations made while integrating.
#[derive(Debug, Clone, PartialEq)]
pub enum GeometryWarning {
    /// The path came within `distance` (chart units) of a coordinate singularity.
    NearChartSingularity { time: f64, distance: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChartPoint {
    pub coords: DVector<f64>,
}

impl ChartPoint {
    pub fn new(coords: impl Into<Vec<f64>>) -> Self {
        Self {
            coords: DVector::from_vec(coords.into()),
        }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    pub base: ChartPoint,
    pub comps: DVector<f64>,
}

impl TangentVector {
    pub fn new(base: ChartPoint, comps: impl Into<Vec<f64>>) -> Self {
        Self {
            base,
            comps: DVector::from_vec(comps.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoTangentVector {
    pub base: ChartPoint,
    pub comps: DVector<f64>,
}

impl CoTangentVector {
    /// Pairing with a tangent vector at the same base point.
    pub fn pair(&self, v: &TangentVector) -> Result<f64, GeometryError> {
        if self.base != v.base {
            return Err(GeometryError::BaseMismatch);
        }
        Ok(self.comps.dot(&v.comps))
    }
}

/// Axis-aligned box of chart coordinates in which the chart is declared valid.
#[derive(Debug, Clone, PartialEq)]
pub struct ChartDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ChartDomain {
    pub fn unbounded(n: usize) -> Self {
        Self {
            lo: vec![f64::NEG_INFINITY; n],
            hi: vec![f64::INFINITY; n],
        }
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.contains_within(x, 0.0)
    }

    /// Membership with the box widened by `slack` on every side.
    pub fn contains_within(&self, x: &[f64], slack: f64) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| v.is_finite() && *v >= *lo - slack && *v <= *hi + slack)
    }
}

/// Numerical settings shared by the geometry routines.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometrySettings {
    pub h_geo: f64,
    pub tol_log: f64,
    pub max_iter: usize,
    /// Fixed RK4 step count for geodesics over a unit parameter interval.
    pub geodesic_steps: usize,
    pub shooting_radius: f64,
}

impl Default for GeometrySettings {
    fn default() -> Self {
        Self {
            h_geo: 1e-5,
            tol_log: 1e-10,
            max_iter: 50,
            geodesic_steps: 128,
            shooting_radius: 2.0,
        }
    }
}

#[derive(Debug, Clone)]
enum Kind {
    Euclidean,
    Sphere,
    HalfPlane,
    Metric(Vec<Vec<Expr>>),
    /// ℝ × M with the block metric 1 ⊕ g; coordinate 0 is the flat factor.
    LineProduct(Box<ManifoldModel>),
}

/// Chart-based metric provider.
#[derive(Debug, Clone)]
pub struct ManifoldModel {
    name: String,
    dim: usize,
    kind: Kind,
    pub domain: ChartDomain,
    pub settings: GeometrySettings,
}

/// Christoffel symbols Γ^k_{ij}, stored at `k*n*n + i*n + j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Christoffel {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Christoffel {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; n * n * n],
        }
    }

    #[inline]
    pub fn get(&self, k: usize, i: usize, j: usize) -> f64 {
        self.data[(k * self.n + i) * self.n + j]
    }

    #[inline]
    fn set(&mut self, k: usize, i: usize, j: usize, v: f64) {
        let n = self.n;
        self.data[(k * n + i) * n + j] = v;
    }

    /// Γ^k_{ij} a^i b^j.
    pub fn contract(&self, a: &[f64], b: &[f64]) -> DVector<f64> {
        let n = self.n;
        DVector::from_fn(n, |k, _| {
            let mut s = 0.0;
            for i in 0..n {
                if a[i] == 0.0 {
                    continue;
                }
                for j in 0..n {
                    s += self.get(k, i, j) * a[i] * b[j];
                }
            }
            s
        })
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// Fully covariant curvature R_{ijkl} = ⟨R(∂_i, ∂_j)∂_k, ∂_l⟩, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Riemann {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Riemann {
    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        let n = self.n;
        self.data[((i * n + j) * n + k) * n + l]
    }

    pub fn eval(&self, x: &[f64], y: &[f64], z: &[f64], w: &[f64]) -> f64 {
        let n = self.n;
        let mut s = 0.0;
        for i in 0..n {
            if x[i] == 0.0 {
                continue;
            }
            for j in 0..n {
                if y[j] == 0.0 {
                    continue;
                }
                let xy = x[i] * y[j];
                for k in 0..n {
                    if z[k] == 0.0 {
                        continue;
                    }
                    for l in 0..n {
                        s += self.get(i, j, k, l) * xy * z[k] * w[l];
                    }
                }
            }
        }
        s
    }

    /// Components in another basis whose columns are given by `e`.
    pub fn in_basis(&self, e: &DMatrix<f64>) -> Riemann {
        let n = self.n;
        let mut cur = self.data.clone();
        // Contract one slot at a time.
        for slot in 0..4 {
            let mut next = vec![0.0; cur.len()];
            let stride = n.pow(3 - slot as u32);
            for idx in 0..cur.len() {
                let a = (idx / stride) % n;
                let base = idx - a * stride;
                let v = cur[idx];
                if v == 0.0 {
                    continue;
                }
                for b in 0..n {
                    next[base + b * stride] += v * e[(a, b)];
                }
            }
            cur = next;
        }
        Riemann { n, data: cur }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

/// End state of a geodesic integration.
#[derive(Debug, Clone)]
pub struct GeodesicEnd {
    pub point: ChartPoint,
    pub velocity: TangentVector,
    /// max_t | |γ̇(t)| − |γ̇(0)| | / |γ̇(0)|.
    pub speed_drift: f64,
    pub warnings: Vec<GeometryWarning>,
}

/// Sampled curve with node velocities.
#[derive(Debug, Clone)]
pub struct CurveSample {
    pub times: Vec<f64>,
    pub points: Vec<ChartPoint>,
    pub velocities: Vec<TangentVector>,
}

/// One cubic Hermite piece of a curve, used for transport.
#[derive(Debug, Clone)]
pub struct Segment {
    pub t0: f64,
    pub t1: f64,
    pub p0: DVector<f64>,
    pub p1: DVector<f64>,
    pub v0: DVector<f64>,
    pub v1: DVector<f64>,
}

impl Segment {
    /// Position and velocity at parameter `s` ∈ [0,1].
    pub fn eval(&self, s: f64) -> (DVector<f64>, DVector<f64>) {
        let h = self.t1 - self.t0;
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let d00 = 6.0 * s2 - 6.0 * s;
        let d10 = 3.0 * s2 - 4.0 * s + 1.0;
        let d01 = -6.0 * s2 + 6.0 * s;
        let d11 = 3.0 * s2 - 2.0 * s;
        let p = &self.p0 * h00 + &self.v0 * (h10 * h) + &self.p1 * h01 + &self.v1 * (h11 * h);
        let v = (&self.p0 * d00 + &self.p1 * d01) / h + &self.v0 * d10 + &self.v1 * d11;
        (p, v)
    }
}

impl CurveSample {
    pub fn segments(&self) -> Vec<Segment> {
        (0..self.times.len().saturating_sub(1))
            .map(|i| Segment {
                t0: self.times[i],
                t1: self.times[i + 1],
                p0: self.points[i].coords.clone(),
                p1: self.points[i + 1].coords.clone(),
                v0: self.velocities[i].comps.clone(),
                v1: self.velocities[i + 1].comps.clone(),
            })
            .collect()
    }
}

impl ManifoldModel {
    pub fn euclidean(n: usize) -> Self {
        Self {
            name: format!("euclidean:{n}"),
            dim: n,
            kind: Kind::Euclidean,
            domain: ChartDomain::unbounded(n),
            settings: GeometrySettings::default(),
        }
    }

    /// Unit sphere in the (θ, φ) chart, g = diag(1, sin²θ). The poles are
    /// coordinate singularities and sit on the boundary of the box.
    pub fn sphere2() -> Self {
        Self {
            name: "sphere2".into(),
            dim: 2,
            kind: Kind::Sphere,
            domain: ChartDomain {
                lo: vec![0.0, -8.0 * std::f64::consts::PI],
                hi: vec![std::f64::consts::PI, 8.0 * std::f64::consts::PI],
            },
            settings: GeometrySettings::default(),
        }
    }

    /// Poincaré upper half-plane, g = (dx² + dy²)/y².
    pub fn halfplane2() -> Self {
        Self {
            name: "halfplane2".into(),
            dim: 2,
            kind: Kind::HalfPlane,
            domain: ChartDomain {
                lo: vec![-1e6, 1e-9],
                hi: vec![1e6, 1e6],
            },
            settings: GeometrySettings::default(),
        }
    }

    /// Metric given by expression strings `g[i][j]` of `x1..xn`.
    pub fn from_metric_exprs(
        entries: &[Vec<String>],
        domain: Option<ChartDomain>,
    ) -> Result<Self, GeometryError> {
        let n = entries.len();
        if n == 0 || entries.iter().any(|r| r.len() != n) {
            return Err(GeometryError::Spec("metric must be a nonempty square array".into()));
        }
        let sym = SymbolTable::state_only(n);
        let g = entries
            .iter()
            .map(|row| row.iter().map(|s| parse_expression(s, &sym)).collect())
            .collect::<Result<Vec<Vec<Expr>>, _>>()?;
        Ok(Self {
            name: format!("metric:{n}"),
            dim: n,
            kind: Kind::Metric(g),
            domain: domain.unwrap_or_else(|| ChartDomain::unbounded(n)),
            settings: GeometrySettings::default(),
        })
    }

    /// Resolve a builtin name such as `euclidean:3`, `sphere2` or `halfplane2`.
    pub fn builtin(name: &str) -> Option<Self> {
        match name {
            "sphere2" => Some(Self::sphere2()),
            "halfplane2" => Some(Self::halfplane2()),
            _ => {
                let n: usize = name.strip_prefix("euclidean:")?.parse().ok()?;
                (n > 0).then(|| Self::euclidean(n))
            }
        }
    }

    /// ℝ × self with metric 1 ⊕ g; the new coordinate comes first.
    pub fn line_product(&self) -> Self {
        let mut lo = vec![f64::NEG_INFINITY];
        lo.extend(&self.domain.lo);
        let mut hi = vec![f64::INFINITY];
        hi.extend(&self.domain.hi);
        Self {
            name: format!("R x {}", self.name),
            dim: self.dim + 1,
            kind: Kind::LineProduct(Box::new(self.clone())),
            domain: ChartDomain { lo, hi },
            settings: self.settings,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_flat(&self) -> bool {
        match &self.kind {
            Kind::Euclidean => true,
            Kind::LineProduct(inner) => inner.is_flat(),
            _ => false,
        }
    }

    fn has_analytic_christoffel(&self) -> bool {
        match &self.kind {
            Kind::Metric(_) => false,
            Kind::LineProduct(inner) => inner.has_analytic_christoffel(),
            _ => true,
        }
    }

    /// Chart distance to the nearest coordinate singularity, if the model has one.
    fn singularity_distance(&self, x: &[f64]) -> Option<f64> {
        match &self.kind {
            Kind::Sphere => Some(x[0].min(std::f64::consts::PI - x[0])),
            Kind::HalfPlane => Some(x[1]),
            Kind::LineProduct(inner) => inner.singularity_distance(&x[1..]),
            _ => None,
        }
    }

    fn check_point(&self, x: &[f64]) -> Result<(), GeometryError> {
        if x.len() != self.dim {
            return Err(GeometryError::Dimension {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !self.domain.contains(x) {
            return Err(GeometryError::OutsideDomain { coords: x.to_vec() });
        }
        Ok(())
    }

    fn metric_raw(&self, x: &[f64]) -> DMatrix<f64> {
        let n = self.dim;
        match &self.kind {
            Kind::Euclidean => DMatrix::identity(n, n),
            Kind::Sphere => {
                let s = x[0].sin();
                DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, s * s]))
            }
            Kind::HalfPlane => DMatrix::identity(2, 2) / (x[1] * x[1]),
            Kind::Metric(g) => {
                let mut m = DMatrix::from_fn(n, n, |i, j| g[i][j].eval(x, &[], 0.0));
                // Symmetrise in case the user wrote slightly different off-diagonal strings.
                let mt = m.transpose();
                m = (m + mt) * 0.5;
                m
            }
            Kind::LineProduct(inner) => {
                let gi = inner.metric_raw(&x[1..]);
                let mut m = DMatrix::zeros(n, n);
                m[(0, 0)] = 1.0;
                m.view_mut((1, 1), (n - 1, n - 1)).copy_from(&gi);
                m
            }
        }
    }

    /// Metric matrix g_{ij}(x); errors outside the domain or if not SPD.
    pub fn metric(&self, x: &[f64]) -> Result<DMatrix<f64>, GeometryError> {
        self.check_point(x)?;
        let g = self.metric_raw(x);
        if g.iter().any(|v| !v.is_finite()) || g.clone().cholesky().is_none() {
            return Err(GeometryError::NotPositiveDefinite { coords: x.to_vec() });
        }
        Ok(g)
    }

    /// Minimum eigenvalue of the metric at `x`.
    pub fn metric_min_eigenvalue(&self, x: &[f64]) -> Result<f64, GeometryError> {
        self.check_point(x)?;
        let g = self.metric_raw(x);
        Ok(g.symmetric_eigenvalues().min())
    }

    pub fn inner(&self, x: &[f64], a: &[f64], b: &[f64]) -> Result<f64, GeometryError> {
        let g = self.metric(x)?;
        Ok(quad(&g, a, b))
    }

    pub fn norm(&self, x: &[f64], a: &[f64]) -> Result<f64, GeometryError> {
        Ok(self.inner(x, a, a)?.max(0.0).sqrt())
    }

    /// Index lowering: tangent vector to its dual covector.
    pub fn lower(&self, v: &TangentVector) -> Result<CoTangentVector, GeometryError> {
        let g = self.metric(v.base.coords.as_slice())?;
        Ok(CoTangentVector {
            base: v.base.clone(),
            comps: g * &v.comps,
        })
    }

    /// Index raising: covector to its dual tangent vector.
    pub fn raise(&self, p: &CoTangentVector) -> Result<TangentVector, GeometryError> {
        let g = self.metric(p.base.coords.as_slice())?;
        let chol = g.cholesky().ok_or_else(|| GeometryError::NotPositiveDefinite {
            coords: p.base.coords.as_slice().to_vec(),
        })?;
        Ok(TangentVector {
            base: p.base.clone(),
            comps: chol.solve(&p.comps),
        })
    }

    fn christoffel_raw(&self, x: &[f64]) -> Christoffel {
        let n = self.dim;
        let mut c = Christoffel::zeros(n);
        match &self.kind {
            Kind::Euclidean => {}
            Kind::Sphere => {
                let (s, co) = x[0].sin_cos();
                c.set(0, 1, 1, -s * co);
                let cot = co / s;
                c.set(1, 0, 1, cot);
                c.set(1, 1, 0, cot);
            }
            Kind::HalfPlane => {
                let y = x[1];
                c.set(0, 0, 1, -1.0 / y);
                c.set(0, 1, 0, -1.0 / y);
                c.set(1, 0, 0, 1.0 / y);
                c.set(1, 1, 1, -1.0 / y);
            }
            Kind::Metric(_) => {
                let h = self.settings.h_geo;
                let ginv = self
                    .metric_raw(x)
                    .try_inverse()
                    .unwrap_or_else(|| DMatrix::from_element(n, n, f64::NAN));
                let mut xs = x.to_vec();
                // dg[l] = ∂_l g
                let dg: Vec<DMatrix<f64>> = (0..n)
                    .map(|l| {
                        xs[l] = x[l] + h;
                        let gp = self.metric_raw(&xs);
                        xs[l] = x[l] - h;
                        let gm = self.metric_raw(&xs);
                        xs[l] = x[l];
                        (gp - gm) / (2.0 * h)
                    })
                    .collect();
                for k in 0..n {
                    for i in 0..n {
                        for j in i..n {
                            let mut s = 0.0;
                            for l in 0..n {
                                s += ginv[(k, l)]
                                    * (dg[i][(j, l)] + dg[j][(i, l)] - dg[l][(i, j)]);
                            }
                            c.set(k, i, j, 0.5 * s);
                            c.set(k, j, i, 0.5 * s);
                        }
                    }
                }
            }
            Kind::LineProduct(inner) => {
                let ci = inner.christoffel_raw(&x[1..]);
                for k in 1..n {
                    for i in 1..n {
                        for j in 1..n {
                            c.set(k, i, j, ci.get(k - 1, i - 1, j - 1));
                        }
                    }
                }
            }
        }
        c
    }

    /// Γ^k_{ij} at `x`, symmetric in (i, j).
    pub fn christoffel_at(&self, x: &[f64]) -> Result<Christoffel, GeometryError> {
        self.metric(x)?;
        let c = self.christoffel_raw(x);
        if c.data.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite { coords: x.to_vec() });
        }
        Ok(c)
    }

    /// ∂_m Γ^k_{ij}, returned as one [`Christoffel`] block per m.
    pub fn christoffel_derivative(&self, x: &[f64]) -> Result<Vec<Christoffel>, GeometryError> {
        self.metric(x)?;
        let n = self.dim;
        if self.is_flat() {
            return Ok(vec![Christoffel::zeros(n); n]);
        }
        let h = if self.has_analytic_christoffel() {
            self.settings.h_geo
        } else {
            self.settings.h_geo.sqrt()
        };
        let mut xs = x.to_vec();
        let out: Vec<Christoffel> = (0..n)
            .map(|m| {
                xs[m] = x[m] + h;
                let cp = self.christoffel_raw(&xs);
                xs[m] = x[m] - h;
                let cm = self.christoffel_raw(&xs);
                xs[m] = x[m];
                Christoffel {
                    n,
                    data: cp
                        .data
                        .iter()
                        .zip(&cm.data)
                        .map(|(a, b)| (a - b) / (2.0 * h))
                        .collect(),
                }
            })
            .collect();
        if out.iter().any(|c| c.data.iter().any(|v| !v.is_finite())) {
            return Err(GeometryError::NonFinite { coords: x.to_vec() });
        }
        Ok(out)
    }

    /// R_{ijkl} at `x` in chart components.
    pub fn riemann_at(&self, x: &[f64]) -> Result<Riemann, GeometryError> {
        Ok(self.connection_data(x)?.riemann)
    }

    /// Metric, Christoffel symbols, their derivatives and curvature at `x`, sharing work.
    pub fn connection_data(&self, x: &[f64]) -> Result<ConnectionData, GeometryError> {
        let n = self.dim;
        let metric = self.metric(x)?;
        let christoffel = self.christoffel_at(x)?;
        let dchristoffel = self.christoffel_derivative(x)?;
        let riemann = if self.is_flat() {
            Riemann {
                n,
                data: vec![0.0; n.pow(4)],
            }
        } else {
            riemann_from(&metric, &christoffel, &dchristoffel)
        };
        Ok(ConnectionData {
            metric,
            christoffel,
            dchristoffel,
            riemann,
        })
    }

    fn check_base(&self, x: &ChartPoint, vs: &[&TangentVector]) -> Result<(), GeometryError> {
        if vs.iter().any(|v| v.base != *x) {
            return Err(GeometryError::BaseMismatch);
        }
        Ok(())
    }

    /// R(X,Y,Z,W) = ⟨R(X,Y)Z, W⟩ at `x`.
    pub fn curvature_at(
        &self,
        x: &ChartPoint,
        a: &TangentVector,
        b: &TangentVector,
        c: &TangentVector,
        d: &TangentVector,
    ) -> Result<f64, GeometryError> {
        self.check_base(x, &[a, b, c, d])?;
        let r = self.riemann_at(x.coords.as_slice())?;
        Ok(r.eval(
            a.comps.as_slice(),
            b.comps.as_slice(),
            c.comps.as_slice(),
            d.comps.as_slice(),
        ))
    }

    fn geodesic_rhs(&self, y: &[f64]) -> Result<Vec<f64>, GeometryError> {
        let n = self.dim;
        let (x, v) = y.split_at(n);
        let c = self.christoffel_raw(x);
        let acc = c.contract(v, v);
        let mut out = Vec::with_capacity(2 * n);
        out.extend_from_slice(v);
        out.extend(acc.iter().map(|a| -a));
        if out.iter().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite { coords: x.to_vec() });
        }
        Ok(out)
    }

    /// RK4 integration of the geodesic equation from (x, v) over parameter length `s`.
    pub fn integrate_geodesic(
        &self,
        x: &ChartPoint,
        v: &TangentVector,
        s: f64,
    ) -> Result<GeodesicEnd, GeometryError> {
        self.check_base(x, &[v])?;
        let xs = x.coords.as_slice();
        self.metric(xs)?;
        if s == 0.0 {
            return Ok(GeodesicEnd {
                point: x.clone(),
                velocity: v.clone(),
                speed_drift: 0.0,
                warnings: Vec::new(),
            });
        }
        let n = self.dim;
        if self.is_flat() {
            let p = &x.coords + &v.comps * s;
            if !self.domain.contains(p.as_slice()) {
                return Err(GeometryError::DomainExit {
                    time: s,
                    coords: p.as_slice().to_vec(),
                });
            }
            let point = ChartPoint { coords: p };
            return Ok(GeodesicEnd {
                velocity: TangentVector {
                    base: point.clone(),
                    comps: v.comps.clone(),
                },
                point,
                speed_drift: 0.0,
                warnings: Vec::new(),
            });
        }
        let steps = ((self.settings.geodesic_steps as f64) * s.abs()).ceil().max(8.0) as usize;
        let h = s / steps as f64;
        let speed0 = self.norm(xs, v.comps.as_slice())?;
        let mut y: Vec<f64> = xs.iter().chain(v.comps.iter()).copied().collect();
        let mut drift: f64 = 0.0;
        let mut warnings = Vec::new();
        let mut warned = false;
        for step in 0..steps {
            let k1 = self.geodesic_rhs(&y)?;
            let y2: Vec<f64> = y.iter().zip(&k1).map(|(a, k)| a + 0.5 * h * k).collect();
            let k2 = self.geodesic_rhs(&y2)?;
            let y3: Vec<f64> = y.iter().zip(&k2).map(|(a, k)| a + 0.5 * h * k).collect();
            let k3 = self.geodesic_rhs(&y3)?;
            let y4: Vec<f64> = y.iter().zip(&k3).map(|(a, k)| a + h * k).collect();
            let k4 = self.geodesic_rhs(&y4)?;
            for i in 0..2 * n {
                y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            let t = h * (step + 1) as f64;
            if !self.domain.contains_within(&y[..n], 1e-9) {
                return Err(GeometryError::DomainExit {
                    time: t,
                    coords: y[..n].to_vec(),
                });
            }
            if let Some(d) = self.singularity_distance(&y[..n]) {
                if d < 1e-3 && !warned {
                    warned = true;
                    warnings.push(GeometryWarning::NearChartSingularity { time: t, distance: d });
                }
            }
            if speed0 > 0.0 {
                let g = self.metric_raw(&y[..n]);
                let sp = quad(&g, &y[n..], &y[n..]).max(0.0).sqrt();
                if sp.is_finite() {
                    drift = drift.max((sp - speed0).abs() / speed0);
                }
            }
        }
        let point = ChartPoint::new(y[..n].to_vec());
        Ok(GeodesicEnd {
            velocity: TangentVector::new(point.clone(), y[n..].to_vec()),
            point,
            speed_drift: drift,
            warnings,
        })
    }

    /// exp_x(v) = γ_v(1).
    pub fn exp_map(&self, x: &ChartPoint, v: &TangentVector) -> Result<ChartPoint, GeometryError> {
        Ok(self.integrate_geodesic(x, v, 1.0)?.point)
    }

    /// Local inverse of exp_x by damped Newton shooting.
    pub fn log_map(&self, x: &ChartPoint, y: &ChartPoint) -> Result<TangentVector, GeometryError> {
        let xs = x.coords.as_slice();
        self.metric(xs)?;
        self.metric(y.coords.as_slice())?;
        let diff = &y.coords - &x.coords;
        if self.is_flat() {
            return Ok(TangentVector {
                base: x.clone(),
                comps: diff,
            });
        }
        let chart_dist = diff.norm();
        if chart_dist > self.settings.shooting_radius {
            return Err(GeometryError::BeyondShootingRadius {
                distance: chart_dist,
                radius: self.settings.shooting_radius,
            });
        }
        if chart_dist == 0.0 {
            return Ok(TangentVector {
                base: x.clone(),
                comps: DVector::zeros(self.dim),
            });
        }
        let n = self.dim;
        let shoot = |v: &DVector<f64>| -> Result<DVector<f64>, GeometryError> {
            let tv = TangentVector {
                base: x.clone(),
                comps: v.clone(),
            };
            Ok(self.exp_map(x, &tv)?.coords - &y.coords)
        };
        let mut v = diff.clone();
        let mut r = shoot(&v)?;
        let mut res = r.norm();
        for _ in 0..self.settings.max_iter {
            if res < self.settings.tol_log {
                return Ok(TangentVector {
                    base: x.clone(),
                    comps: v,
                });
            }
            let hj = 1e-6 * v.norm().max(1e-3);
            let mut jac = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut vp = v.clone();
                vp[j] += hj;
                let mut vm = v.clone();
                vm[j] -= hj;
                let col = (shoot(&vp)? - shoot(&vm)?) / (2.0 * hj);
                jac.set_column(j, &col);
            }
            let step = jac
                .lu()
                .solve(&(-&r))
                .ok_or(GeometryError::NonConvergence {
                    iterations: 0,
                    residual: res,
                })?;
            let mut alpha = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &v + &step * alpha;
                if let Ok(rc) = shoot(&cand) {
                    let rn = rc.norm();
                    if rn < res {
                        v = cand;
                        r = rc;
                        res = rn;
                        accepted = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        if res < self.settings.tol_log {
            return Ok(TangentVector {
                base: x.clone(),
                comps: v,
            });
        }
        Err(GeometryError::NonConvergence {
            iterations: self.settings.max_iter,
            residual: res,
        })
    }

    /// ρ(x, y) = |log_x y|.
    pub fn distance(&self, x: &ChartPoint, y: &ChartPoint) -> Result<f64, GeometryError> {
        let v = self.log_map(x, y)?;
        self.norm(x.coords.as_slice(), v.comps.as_slice())
    }

    fn transport_rhs(&self, p: &[f64], vel: &[f64], m: &DMatrix<f64>) -> DMatrix<f64> {
        let c = self.christoffel_raw(p);
        let n = self.dim;
        let mut out = DMatrix::zeros(n, m.ncols());
        for col in 0..m.ncols() {
            let d = c.contract(vel, m.column(col).as_slice());
            out.set_column(col, &(-d));
        }
        out
    }

    /// One RK4 step of the transport ODE for the columns of `m` along a Hermite segment.
    pub fn transport_step(&self, seg: &Segment, m: &DMatrix<f64>) -> DMatrix<f64> {
        let h = seg.t1 - seg.t0;
        if self.is_flat() || h == 0.0 {
            return m.clone();
        }
        let (p0, v0) = seg.eval(0.0);
        let (pm, vm) = seg.eval(0.5);
        let (p1, v1) = seg.eval(1.0);
        let k1 = self.transport_rhs(p0.as_slice(), v0.as_slice(), m);
        let k2 = self.transport_rhs(pm.as_slice(), vm.as_slice(), &(m + &k1 * (0.5 * h)));
        let k3 = self.transport_rhs(pm.as_slice(), vm.as_slice(), &(m + &k2 * (0.5 * h)));
        let k4 = self.transport_rhs(p1.as_slice(), v1.as_slice(), &(m + &k3 * h));
        m + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// Transport the columns of `m` along a chain of segments; returns the value at every joint.
    pub fn transport_columns(
        &self,
        segments: &[Segment],
        m: &DMatrix<f64>,
    ) -> Result<Vec<DMatrix<f64>>, GeometryError> {
        let mut out = Vec::with_capacity(segments.len() + 1);
        out.push(m.clone());
        let mut cur = m.clone();
        for seg in segments {
            for p in [&seg.p0, &seg.p1] {
                if !self.domain.contains(p.as_slice()) {
                    return Err(GeometryError::DomainExit {
                        time: seg.t1,
                        coords: p.as_slice().to_vec(),
                    });
                }
            }
            cur = self.transport_step(seg, &cur);
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(GeometryError::NonFinite {
                    coords: seg.p1.as_slice().to_vec(),
                });
            }
            out.push(cur.clone());
        }
        Ok(out)
    }

    /// Parallel transport of `v` from the start to the end of a sampled curve.
    pub fn parallel_transport(
        &self,
        curve: &CurveSample,
        v: &TangentVector,
    ) -> Result<TangentVector, GeometryError> {
        let start = curve.points.first().ok_or(GeometryError::BaseMismatch)?;
        if v.base != *start {
            return Err(GeometryError::BaseMismatch);
        }
        for p in &curve.points {
            self.check_point(p.coords.as_slice())
                .map_err(|_| GeometryError::DomainExit {
                    time: 0.0,
                    coords: p.coords.as_slice().to_vec(),
                })?;
        }
        let m = DMatrix::from_column_slice(self.dim, 1, v.comps.as_slice());
        let all = self.transport_columns(&curve.segments(), &m)?;
        let last = all.last().unwrap();
        Ok(TangentVector {
            base: curve.points.last().unwrap().clone(),
            comps: last.column(0).into_owned(),
        })
    }

    /// Gram–Schmidt of the chart axes under g at `x`; columns are the basis vectors.
    pub fn orthonormal_basis(&self, x: &[f64]) -> Result<DMatrix<f64>, GeometryError> {
        let g = self.metric(x)?;
        gram_schmidt(&g, &DMatrix::identity(self.dim, self.dim))
    }
}

/// Geometric data at one point.
#[derive(Debug, Clone)]
pub struct ConnectionData {
    pub metric: DMatrix<f64>,
    pub christoffel: Christoffel,
    /// ∂_m Γ, one block per m.
    pub dchristoffel: Vec<Christoffel>,
    pub riemann: Riemann,
}

/// R_{ijkl} from g, Γ and ∂Γ, with
/// R^l_{ijk} = ∂_iΓ^l_{jk} − ∂_jΓ^l_{ik} + Γ^l_{im}Γ^m_{jk} − Γ^l_{jm}Γ^m_{ik}.
pub fn riemann_from(g: &DMatrix<f64>, c: &Christoffel, dc: &[Christoffel]) -> Riemann {
    let n = c.n;
    let mut up = vec![0.0; n.pow(4)];
    for l in 0..n {
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    let mut v = dc[i].get(l, j, k) - dc[j].get(l, i, k);
                    for m in 0..n {
                        v += c.get(l, i, m) * c.get(m, j, k) - c.get(l, j, m) * c.get(m, i, k);
                    }
                    up[((l * n + i) * n + j) * n + k] = v;
                }
            }
        }
    }
    let mut data = vec![0.0; n.pow(4)];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                for q in 0..n {
                    let mut v = 0.0;
                    for l in 0..n {
                        v += g[(l, q)] * up[((l * n + i) * n + j) * n + k];
                    }
                    data[((i * n + j) * n + k) * n + q] = v;
                }
            }
        }
    }
    Riemann { n, data }
}

/// aᵀ G b.
pub fn quad(g: &DMatrix<f64>, a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            s += a[i] * g[(i, j)] * b[j];
        }
    }
    s
}

/// Orthonormalise the columns of `m` under the inner product `g`.
pub fn gram_schmidt(g: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<DMatrix<f64>, GeometryError> {
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, m.ncols());
    for j in 0..m.ncols() {
        let mut v = m.column(j).into_owned();
        for _ in 0..2 {
            for k in 0..j {
                let e = out.column(k).into_owned();
                let c = quad(g, e.as_slice(), v.as_slice());
                v -= e * c;
            }
        }
        let nrm = quad(g, v.as_slice(), v.as_slice()).sqrt();
        if !(nrm > 1e-14) {
            return Err(GeometryError::Spec("seed basis is degenerate".into()));
        }
        out.set_column(j, &(v / nrm));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tv(x: &ChartPoint, c: &[f64]) -> TangentVector {
        TangentVector::new(x.clone(), c.to_vec())
    }

    #[test]
    fn euclidean_christoffel_vanishes() {
        let m = ManifoldModel::euclidean(2);
        assert!(m.christoffel_at(&[0.3, -4.0]).unwrap().is_zero());
    }

    #[test]
    fn sphere_christoffel_matches_closed_form() {
        let m = ManifoldModel::sphere2();
        let th = PI / 3.0;
        let c = m.christoffel_at(&[th, 0.2]).unwrap();
        assert!((c.get(0, 1, 1) + th.sin() * th.cos()).abs() < 1e-12);
        assert!((c.get(0, 1, 1) + 0.4330127).abs() < 1e-6);
        // The finite-difference path on the same metric agrees.
        let fd = ManifoldModel::from_metric_exprs(
            &[
                vec!["1".into(), "0".into()],
                vec!["0".into(), "sin(x1)^2".into()],
            ],
            None,
        )
        .unwrap();
        let cf = fd.christoffel_at(&[th, 0.2]).unwrap();
        for (a, b) in c.data.iter().zip(&cf.data) {
            assert!((a - b).abs() < 1e-8, "{a} vs {b}");
        }
    }

    #[test]
    fn christoffel_symmetric_in_lower_indices() {
        let m = ManifoldModel::from_metric_exprs(
            &[
                vec!["1 + x1^2".into(), "0.3*x2".into()],
                vec!["0.3*x2".into(), "2 + sin(x1)".into()],
            ],
            None,
        )
        .unwrap();
        let c = m.christoffel_at(&[0.4, 0.7]).unwrap();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((c.get(k, i, j) - c.get(k, j, i)).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn domain_and_spd_errors() {
        let s = ManifoldModel::sphere2();
        assert!(matches!(
            s.christoffel_at(&[-0.1, 0.0]),
            Err(GeometryError::OutsideDomain { .. })
        ));
        let bad = ManifoldModel::from_metric_exprs(
            &[vec!["1".into(), "2".into()], vec!["2".into(), "1".into()]],
            None,
        )
        .unwrap();
        assert!(matches!(
            bad.christoffel_at(&[0.0, 0.0]),
            Err(GeometryError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn sphere_sectional_curvature_is_one() {
        let m = ManifoldModel::sphere2();
        let x = ChartPoint::new(vec![1.1, 0.4]);
        let e1 = tv(&x, &[1.0, 0.0]);
        let e2 = tv(&x, &[0.0, 1.0 / 1.1f64.sin()]);
        let k = m.curvature_at(&x, &e1, &e2, &e2, &e1).unwrap();
        assert!((k - 1.0).abs() < 1e-4, "{k}");
        let swapped = m.curvature_at(&x, &e2, &e1, &e2, &e1).unwrap();
        assert!((k + swapped).abs() < 1e-8);
    }

    #[test]
    fn halfplane_curvature_is_minus_one() {
        let m = ManifoldModel::halfplane2();
        let y = 0.8;
        let x = ChartPoint::new(vec![0.3, y]);
        let e1 = tv(&x, &[y, 0.0]);
        let e2 = tv(&x, &[0.0, y]);
        let k = m.curvature_at(&x, &e1, &e2, &e2, &e1).unwrap();
        assert!((k + 1.0).abs() < 1e-4, "{k}");
    }

    #[test]
    fn curvature_base_mismatch() {
        let m = ManifoldModel::sphere2();
        let x = ChartPoint::new(vec![1.0, 0.0]);
        let y = ChartPoint::new(vec![1.2, 0.0]);
        let a = tv(&x, &[1.0, 0.0]);
        let b = tv(&y, &[1.0, 0.0]);
        assert_eq!(
            m.curvature_at(&x, &a, &b, &a, &a),
            Err(GeometryError::BaseMismatch)
        );
    }

    #[test]
    fn flat_geodesic_is_affine() {
        let m = ManifoldModel::euclidean(3);
        let x = ChartPoint::new(vec![1.0, 2.0, 3.0]);
        let v = tv(&x, &[0.5, -1.0, 2.0]);
        let end = m.integrate_geodesic(&x, &v, 2.0).unwrap();
        assert_eq!(end.point.coords.as_slice(), &[2.0, 0.0, 7.0]);
        let same = m.integrate_geodesic(&x, &v, 0.0).unwrap();
        assert_eq!(same.point, x);
        assert_eq!(same.velocity, v);
    }

    #[test]
    fn sphere_meridian_reaches_pole_with_warning() {
        let m = ManifoldModel::sphere2();
        let x = ChartPoint::new(vec![PI / 2.0, 0.3]);
        let v = tv(&x, &[-1.0, 0.0]);
        let end = m.integrate_geodesic(&x, &v, PI / 2.0).unwrap();
        assert!(end.point.coords[0].abs() < 1e-6);
        assert!(!end.warnings.is_empty());
    }

    #[test]
    fn sphere_geodesic_conserves_speed() {
        let m = ManifoldModel::sphere2();
        let x = ChartPoint::new(vec![1.0, 0.0]);
        let v = tv(&x, &[0.3, 0.9]);
        let end = m.integrate_geodesic(&x, &v, 1.5).unwrap();
        assert!(end.speed_drift < 1e-6, "{}", end.speed_drift);
    }

    #[test]
    fn exp_of_zero_and_log_of_self() {
        let m = ManifoldModel::sphere2();
        let x = ChartPoint::new(vec![1.0, 0.5]);
        assert_eq!(m.exp_map(&x, &tv(&x, &[0.0, 0.0])).unwrap(), x);
        let l = m.log_map(&x, &x).unwrap();
        assert_eq!(l.comps.norm(), 0.0);
        assert_eq!(m.distance(&x, &x).unwrap(), 0.0);
    }

    #[test]
    fn sphere_log_round_trip_and_distance() {
        let m = ManifoldModel::sphere2();
        let x = ChartPoint::new(vec![1.2, 0.1]);
        let y = ChartPoint::new(vec![0.9, 0.6]);
        let v = m.log_map(&x, &y).unwrap();
        let back = m.exp_map(&x, &v).unwrap();
        assert!((back.coords - &y.coords).norm() < 1e-9);
        // Great-circle distance from the spherical law of cosines.
        let (t1, p1, t2, p2) = (1.2f64, 0.1f64, 0.9f64, 0.6f64);
        let want = (t1.cos() * t2.cos() + t1.sin() * t2.sin() * (p2 - p1).cos()).acos();
        assert!((m.distance(&x, &y).unwrap() - want).abs() < 1e-7);
        assert!((m.distance(&y, &x).unwrap() - want).abs() < 1e-7);
    }

    #[test]
    fn quarter_arc_to_pole_neighbourhood() {
        let m = ManifoldModel::sphere2();
        let eq = ChartPoint::new(vec![PI / 2.0, 0.0]);
        let near_pole = ChartPoint::new(vec![1e-7, 0.0]);
        let d = m.distance(&eq, &near_pole).unwrap();
        assert!((d - PI / 2.0).abs() < 1e-6, "{d}");
    }

    #[test]
    fn log_beyond_radius_errors() {
        let m = ManifoldModel::sphere2();
        let x = ChartPoint::new(vec![0.5, 0.0]);
        let y = ChartPoint::new(vec![2.5, 3.0]);
        assert!(matches!(
            m.log_map(&x, &y),
            Err(GeometryError::BeyondShootingRadius { .. })
        ));
    }

    fn latitude_circle(theta: f64, nodes: usize) -> CurveSample {
        let x0 = ChartPoint::new(vec![theta, 0.0]);
        let mut c = CurveSample {
            times: vec![],
            points: vec![],
            velocities: vec![],
        };
        for i in 0..=nodes {
            let t = 2.0 * PI * i as f64 / nodes as f64;
            let p = ChartPoint::new(vec![theta, t]);
            c.times.push(t);
            c.velocities.push(TangentVector::new(p.clone(), vec![0.0, 1.0]));
            c.points.push(p);
        }
        let _ = x0;
        c
    }

    #[test]
    fn holonomy_around_latitude() {
        let m = ManifoldModel::sphere2();
        let th = PI / 3.0;
        let c = latitude_circle(th, 512);
        let v0 = TangentVector::new(c.points[0].clone(), vec![1.0, 0.0]);
        let v1 = m.parallel_transport(&c, &v0).unwrap();
        // Rotation by 2π cos θ = π: the vector comes back negated.
        let s = th.sin();
        let angle = (v1.comps[1] * s).atan2(v1.comps[0]);
        assert!((angle.abs() - PI).abs() < 1e-6, "{angle}");
        let n0 = m.norm(c.points[0].coords.as_slice(), v0.comps.as_slice()).unwrap();
        let n1 = m.norm(c.points[0].coords.as_slice(), v1.comps.as_slice()).unwrap();
        assert!((n0 - n1).abs() < 1e-6);
    }

    #[test]
    fn flat_transport_keeps_components() {
        let m = ManifoldModel::euclidean(2);
        let c = CurveSample {
            times: vec![0.0, 1.0],
            points: vec![ChartPoint::new(vec![0.0, 0.0]), ChartPoint::new(vec![1.0, 1.0])],
            velocities: vec![
                TangentVector::new(ChartPoint::new(vec![0.0, 0.0]), vec![1.0, 1.0]),
                TangentVector::new(ChartPoint::new(vec![1.0, 1.0]), vec![1.0, 1.0]),
            ],
        };
        let v = TangentVector::new(ChartPoint::new(vec![0.0, 0.0]), vec![3.0, -2.0]);
        assert_eq!(m.parallel_transport(&c, &v).unwrap().comps, v.comps);
    }

    #[test]
    fn raise_lower_round_trip() {
        let m = ManifoldModel::halfplane2();
        let x = ChartPoint::new(vec![0.2, 0.6]);
        let v = TangentVector::new(x.clone(), vec![0.7, -1.3]);
        let p = m.lower(&v).unwrap();
        let back = m.raise(&p).unwrap();
        assert!((back.comps - v.comps).norm() < 1e-10);
        let w = TangentVector::new(x, vec![2.0, 1.0]);
        let pv = p.pair(&w).unwrap();
        assert!((pv - m.inner(&[0.2, 0.6], &[0.7, -1.3], &[2.0, 1.0]).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn line_product_blocks() {
        let m = ManifoldModel::sphere2().line_product();
        assert_eq!(m.dim(), 3);
        let x = [5.0, 1.0, 0.3];
        let g = m.metric(&x).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
        assert!((g[(2, 2)] - 1.0f64.sin().powi(2)).abs() < 1e-15);
        let r = m.riemann_at(&x).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    assert_eq!(r.get(0, i, j, k), 0.0);
                    assert_eq!(r.get(i, j, k, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn builtin_names() {
        assert_eq!(ManifoldModel::builtin("euclidean:3").unwrap().dim(), 3);
        assert!(ManifoldModel::builtin("euclidean:0").is_none());
        assert!(ManifoldModel::builtin("torus").is_none());
        assert_eq!(ManifoldModel::builtin("halfplane2").unwrap().name(), "halfplane2");
    }

    #[test]
    fn riemann_in_basis_matches_direct_evaluation() {
        let m = ManifoldModel::sphere2();
        let x = [0.9, 0.0];
        let r = m.riemann_at(&x).unwrap();
        let e = m.orthonormal_basis(&x).unwrap();
        let rf = r.in_basis(&e);
        let col = |k: usize| e.column(k).iter().copied().collect::<Vec<_>>();
        let direct = r.eval(&col(0), &col(1), &col(1), &col(0));
        assert!((rf.get(0, 1, 1, 0) - direct).abs() < 1e-12);
        assert!((direct - 1.0).abs() < 1e-4);
    }
}
