//! Problem descriptions: control sets, Mayer and Bolza problems, control signals,
//! multipliers, and the TOML problem-file loader.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::expr::{parse_expression, Expr, ExprError, SymbolTable};
use crate::geometry::{ChartDomain, ManifoldModel};

/// Machine-readable rejection reason.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ReasonCode {
    MissingKey,
    DimensionMismatch,
    ParseError,
    InvalidValue,
    UnknownManifold,
    UnboundedAxis,
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("{reason:?}: {message}")]
pub struct ProblemError {
    pub reason: ReasonCode,
    pub message: String,
}

impl ProblemError {
    pub fn new(reason: ReasonCode, message: impl Into<String>) -> Self {
        Self {
            reason,
            message: message.into(),
        }
    }
}

fn err<T>(reason: ReasonCode, message: impl Into<String>) -> Result<T, ProblemError> {
    Err(ProblemError::new(reason, message))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ControlSetKind {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Points(Vec<Vec<f64>>),
}

/// Control set U with its sampling rule for maximisation grids.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSetSpec {
    pub kind: ControlSetKind,
    pub sample_count: usize,
    /// Finite sampling bounds used instead of infinite box bounds.
    pub sample_box: Option<(Vec<f64>, Vec<f64>)>,
}

impl ControlSetSpec {
    pub fn boxed(lo: Vec<f64>, hi: Vec<f64>, sample_count: usize) -> Result<Self, ProblemError> {
        if lo.len() != hi.len() || lo.is_empty() {
            return err(ReasonCode::DimensionMismatch, "box bounds must have equal nonzero length");
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return err(ReasonCode::InvalidValue, "box requires lo <= hi on every axis");
        }
        if sample_count < 1 {
            return err(ReasonCode::InvalidValue, "sample_count must be at least 1");
        }
        Ok(Self {
            kind: ControlSetKind::Box { lo, hi },
            sample_count,
            sample_box: None,
        })
    }

    pub fn points(points: Vec<Vec<f64>>) -> Result<Self, ProblemError> {
        let Some(first) = points.first() else {
            return err(ReasonCode::InvalidValue, "finite control set is empty");
        };
        let m = first.len();
        if m == 0 || points.iter().any(|p| p.len() != m) {
            return err(ReasonCode::DimensionMismatch, "control points have inconsistent length");
        }
        Ok(Self {
            kind: ControlSetKind::Points(points),
            sample_count: 1,
            sample_box: None,
        })
    }

    pub fn with_sample_box(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.sample_box = Some((lo, hi));
        self
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ControlSetKind::Box { lo, .. } => lo.len(),
            ControlSetKind::Points(p) => p[0].len(),
        }
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        const TOL: f64 = 1e-12;
        match &self.kind {
            ControlSetKind::Box { lo, hi } => {
                u.len() == lo.len()
                    && u.iter()
                        .zip(lo.iter().zip(hi))
                        .all(|(v, (a, b))| *v >= a - TOL && *v <= b + TOL)
            }
            ControlSetKind::Points(ps) => ps
                .iter()
                .any(|p| p.len() == u.len() && p.iter().zip(u).all(|(a, b)| (a - b).abs() <= TOL)),
        }
    }
}

/// Tensor grid over a box (corners always included) or the finite list verbatim.
pub fn sample_controls(spec: &ControlSetSpec) -> Result<Vec<Vec<f64>>, ProblemError> {
    match &spec.kind {
        ControlSetKind::Points(p) => Ok(p.clone()),
        ControlSetKind::Box { lo, hi } => {
            let m = lo.len();
            let mut axes = Vec::with_capacity(m);
            for a in 0..m {
                let (mut l, mut h) = (lo[a], hi[a]);
                if let Some((sl, sh)) = &spec.sample_box {
                    if sl.len() != m || sh.len() != m {
                        return err(ReasonCode::DimensionMismatch, "sample box has wrong length");
                    }
                    if !l.is_finite() {
                        l = sl[a];
                    }
                    if !h.is_finite() {
                        h = sh[a];
                    }
                }
                if !l.is_finite() || !h.is_finite() {
                    return err(
                        ReasonCode::UnboundedAxis,
                        format!("control axis {} is unbounded and has no sample override", a + 1),
                    );
                }
                let c = spec.sample_count;
                let pts: Vec<f64> = if c == 1 || l == h {
                    vec![l]
                } else {
                    (0..c)
                        .map(|i| {
                            if i == c - 1 {
                                h
                            } else {
                                l + (h - l) * i as f64 / (c - 1) as f64
                            }
                        })
                        .collect()
                };
                axes.push(pts);
            }
            let mut out: Vec<Vec<f64>> = vec![Vec::new()];
            for axis in &axes {
                out = out
                    .into_iter()
                    .flat_map(|p| {
                        axis.iter().map(move |v| {
                            let mut q = p.clone();
                            q.push(*v);
                            q
                        })
                    })
                    .collect();
            }
            Ok(out)
        }
    }
}

/// Piecewise-constant control on the uniform grid `t_i = i T / N`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSignal {
    pub horizon: f64,
    pub values: Vec<Vec<f64>>,
}

impl ControlSignal {
    pub fn constant(horizon: f64, cells: usize, u: &[f64]) -> Self {
        Self {
            horizon,
            values: vec![u.to_vec(); cells],
        }
    }

    /// Cell `i` takes the value of `f` at its midpoint.
    pub fn from_fn(horizon: f64, cells: usize, f: impl Fn(f64) -> Vec<f64>) -> Self {
        let h = horizon / cells as f64;
        Self {
            horizon,
            values: (0..cells).map(|i| f((i as f64 + 0.5) * h)).collect(),
        }
    }

    /// Segments `(until, value)`, applied to the first segment whose end lies past the cell midpoint.
    pub fn from_segments(
        horizon: f64,
        cells: usize,
        segments: &[(f64, Vec<f64>)],
    ) -> Result<Self, ProblemError> {
        if segments.is_empty() {
            return err(ReasonCode::MissingKey, "control has no segments");
        }
        let m = segments[0].1.len();
        if segments.iter().any(|s| s.1.len() != m) {
            return err(ReasonCode::DimensionMismatch, "control segments differ in length");
        }
        if segments.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return err(ReasonCode::InvalidValue, "segment ends must increase");
        }
        Ok(Self::from_fn(horizon, cells, |t| {
            segments
                .iter()
                .find(|s| t < s.0)
                .unwrap_or_else(|| segments.last().unwrap())
                .1
                .clone()
        }))
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.values.len() as f64
    }

    pub fn times(&self) -> Vec<f64> {
        let h = self.step();
        (0..=self.cells()).map(|i| i as f64 * h).collect()
    }

    /// Value at time t (right-continuous except at T).
    pub fn at(&self, t: f64) -> &[f64] {
        let i = ((t / self.step()).floor() as isize).clamp(0, self.cells() as isize - 1) as usize;
        &self.values[i]
    }

    /// Same signal on a grid refined by an integer factor.
    pub fn refined(&self, factor: usize) -> Self {
        Self {
            horizon: self.horizon,
            values: self
                .values
                .iter()
                .flat_map(|v| std::iter::repeat(v.clone()).take(factor))
                .collect(),
        }
    }

    /// Indices `i` where cell `i` differs from cell `i-1`; the breakpoint is `t_i`.
    pub fn breakpoints(&self) -> Vec<usize> {
        (1..self.cells())
            .filter(|&i| self.values[i] != self.values[i - 1])
            .collect()
    }
}

/// Lagrange multiplier ℓ = (ℓ_φ0..ℓ_φj, ℓ_ψ).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Multiplier {
    pub ell_phi: Vec<f64>,
    pub ell_psi: Vec<f64>,
}

impl Multiplier {
    pub fn new(ell_phi: Vec<f64>, ell_psi: Vec<f64>) -> Self {
        Self { ell_phi, ell_psi }
    }

    pub fn from_flat(v: &[f64], j1: usize) -> Self {
        Self {
            ell_phi: v[..j1].to_vec(),
            ell_psi: v[j1..].to_vec(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.ell_phi.iter().chain(&self.ell_psi).copied().collect()
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self {
            ell_phi: self.ell_phi.iter().map(|v| v * c).collect(),
            ell_psi: self.ell_psi.iter().map(|v| v * c).collect(),
        }
    }

    pub fn unit(&self) -> Self {
        self.scaled(1.0 / self.norm())
    }

    /// Scaled so that ℓ_φ0 = −1 when it is negative; otherwise unit norm.
    pub fn normalized(&self) -> Self {
        match self.ell_phi.first() {
            Some(&l0) if l0 < -1e-12 => self.scaled(-1.0 / l0),
            _ => self.unit(),
        }
    }

    pub fn is_normal(&self, tol: f64) -> bool {
        self.ell_phi.first().is_some_and(|l0| *l0 < -tol * self.norm())
    }

    /// Checks nontriviality and sign; returns the offending φ index if any.
    pub fn validate(&self, j1: usize, k: usize) -> Result<(), ProblemError> {
        if self.ell_phi.len() != j1 || self.ell_psi.len() != k {
            return err(
                ReasonCode::DimensionMismatch,
                format!(
                    "multiplier has {}+{} entries, problem needs {}+{}",
                    self.ell_phi.len(),
                    self.ell_psi.len(),
                    j1,
                    k
                ),
            );
        }
        if !(self.norm() > 1e-12) {
            return err(ReasonCode::InvalidValue, "multiplier is zero");
        }
        if let Some(i) = self.ell_phi.iter().position(|v| *v > 0.0) {
            return err(
                ReasonCode::InvalidValue,
                format!("ell_phi[{i}] = {} is positive", self.ell_phi[i]),
            );
        }
        Ok(())
    }
}

/// Reference candidate: initial point and control.
#[derive(Debug, Clone, PartialEq)]
pub struct Reference {
    pub x0: Vec<f64>,
    pub control: ControlSignal,
}

/// Mayer problem (P) in a single chart.
#[derive(Debug, Clone)]
pub struct ControlProblem {
    pub name: String,
    pub manifold: ManifoldModel,
    pub n: usize,
    pub m: usize,
    pub horizon: f64,
    pub grid_n: usize,
    /// Chart components of f, in `x1..xn, u1..um, t`.
    pub dynamics: Vec<Expr>,
    /// φ₀..φ_j in the endpoint variables `x{i}_0, x{i}_T`.
    pub phi: Vec<Expr>,
    pub psi: Vec<Expr>,
    pub control_set: ControlSetSpec,
    pub reference: Option<Reference>,
    /// User assertion that M is complete and simply connected.
    pub assume_complete: bool,
    pub lipschitz_box: Option<(Vec<f64>, Vec<f64>)>,
}

/// Bolza problem (P₂). `base` carries the dynamics, controls and reference; its
/// `phi` is `[h(x(T))]` and its `psi` is `ψ₁(x(0)) ++ ψ₂(x(T))`, lifted to endpoint variables.
#[derive(Debug, Clone)]
pub struct BolzaProblem {
    pub base: ControlProblem,
    pub f0: Expr,
    pub h: Expr,
    pub psi1: Vec<Expr>,
    pub psi2: Vec<Expr>,
}

#[derive(Debug, Clone)]
pub enum LoadedProblem {
    Mayer(ControlProblem),
    Bolza(BolzaProblem),
}

impl LoadedProblem {
    pub fn base(&self) -> &ControlProblem {
        match self {
            LoadedProblem::Mayer(p) => p,
            LoadedProblem::Bolza(b) => &b.base,
        }
    }
}

impl ControlProblem {
    pub fn j(&self) -> usize {
        self.phi.len() - 1
    }

    pub fn k(&self) -> usize {
        self.psi.len()
    }

    pub fn step(&self) -> f64 {
        self.horizon / self.grid_n as f64
    }

    /// f(t, x, u) in chart components.
    pub fn f(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.dynamics.iter().map(|e| e.eval(x, u, t)).collect()
    }

    /// Chart Jacobian ∂f^k/∂x^j as rows k.
    pub fn jacobian(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<Vec<f64>> {
        self.dynamics.iter().map(|e| e.grad_state(x, u, t)).collect()
    }

    pub fn endpoint_args(x0: &[f64], xt: &[f64]) -> Vec<f64> {
        x0.iter().chain(xt).copied().collect()
    }

    /// Checks a reference or direction control against the grid and U.
    pub fn check_signal(&self, u: &ControlSignal) -> Result<(), ProblemError> {
        if u.cells() != self.grid_n {
            return err(
                ReasonCode::DimensionMismatch,
                format!("control has {} cells, grid has {}", u.cells(), self.grid_n),
            );
        }
        if (u.horizon - self.horizon).abs() > 1e-12 * self.horizon {
            return err(ReasonCode::InvalidValue, "control horizon differs from T");
        }
        for (i, v) in u.values.iter().enumerate() {
            if v.len() != self.m {
                return err(ReasonCode::DimensionMismatch, format!("cell {i} has wrong length"));
            }
            if !self.control_set.contains(v) {
                return err(ReasonCode::InvalidValue, format!("cell {i} value {v:?} is outside U"));
            }
        }
        Ok(())
    }

    /// Same problem on another grid; the reference control is resampled.
    pub fn with_grid(&self, grid_n: usize) -> Self {
        let mut p = self.clone();
        p.grid_n = grid_n;
        if let Some(r) = &self.reference {
            let old = &r.control;
            p.reference = Some(Reference {
                x0: r.x0.clone(),
                control: ControlSignal::from_fn(self.horizon, grid_n, |t| old.at(t).to_vec()),
            });
        }
        p
    }
}

/// Rewrites expressions over `x1..xn` into the endpoint table (`x{i}_0` when
/// `initial`, else `x{i}_T`).
pub fn lift_to_endpoint(e: &Expr, n: usize, initial: bool) -> Expr {
    let off = if initial { 0 } else { n };
    e.map_states(&|i| i + off)
}

/// State augmentation x⁰ = ∫ f⁰ on ℝ × M. The new coordinate is index 0.
pub fn mayerize(b: &BolzaProblem) -> ControlProblem {
    let p = &b.base;
    let n = p.n;
    let n1 = n + 1;
    let shift = |e: &Expr| e.map_states(&|i| i + 1);
    let mut dynamics = vec![shift(&b.f0)];
    dynamics.extend(p.dynamics.iter().map(shift));
    // Endpoint table for n+1 states: x⁰(0)=0, x(0)=1..=n, x⁰(T)=n1, x(T)=n1+1..
    let at0 = |e: &Expr| e.map_states(&|i| i + 1);
    let at_t = |e: &Expr| e.map_states(&|i| i + n1 + 1);
    let phi0 = Expr::Bin(
        crate::expr::BinOp::Add,
        Box::new(Expr::State(n1)),
        Box::new(at_t(&b.h)),
    );
    let mut psi = vec![Expr::State(0)];
    psi.extend(b.psi1.iter().map(at0));
    psi.extend(b.psi2.iter().map(at_t));
    let reference = p.reference.as_ref().map(|r| {
        let mut x0 = vec![0.0];
        x0.extend(&r.x0);
        Reference {
            x0,
            control: r.control.clone(),
        }
    });
    let lipschitz_box = p.lipschitz_box.as_ref().map(|(lo, hi)| {
        let mut l = vec![-1.0];
        l.extend(lo);
        let mut h = vec![1.0];
        h.extend(hi);
        (l, h)
    });
    ControlProblem {
        name: format!("{} (mayer)", p.name),
        manifold: p.manifold.line_product(),
        n: n1,
        m: p.m,
        horizon: p.horizon,
        grid_n: p.grid_n,
        dynamics,
        phi: vec![phi0],
        psi,
        control_set: p.control_set.clone(),
        reference,
        assume_complete: p.assume_complete,
        lipschitz_box,
    }
}

/// Sampled Lipschitz estimate of x ↦ f(t,x,u) on a box, in chart norms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzEstimate {
    pub constant: f64,
    pub pairs: usize,
}

pub fn estimate_lipschitz(
    p: &ControlProblem,
    lo: &[f64],
    hi: &[f64],
    pairs: usize,
    seed: u64,
) -> Result<LipschitzEstimate, ProblemError> {
    if lo.len() != p.n || hi.len() != p.n {
        return err(ReasonCode::DimensionMismatch, "lipschitz box has wrong dimension");
    }
    if lo.iter().chain(hi).any(|v| !v.is_finite()) {
        return err(ReasonCode::UnboundedAxis, "lipschitz box must be bounded");
    }
    let us = sample_controls(&p.control_set)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: f64 = 0.0;
    for _ in 0..pairs {
        let x: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| rng.gen_range(*a..=*b)).collect();
        let y: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| rng.gen_range(*a..=*b)).collect();
        let u = &us[rng.gen_range(0..us.len())];
        let t = rng.gen_range(0.0..=p.horizon);
        let fx = p.f(t, &x, u);
        let fy = p.f(t, &y, u);
        let dx = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let df = fx.iter().zip(&fy).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if dx > 1e-12 && df.is_finite() {
            best = best.max(df / dx);
        }
    }
    Ok(LipschitzEstimate {
        constant: best,
        pairs,
    })
}

// ---------------------------------------------------------------------------
// TOML loading

type Table = toml::map::Map<String, toml::Value>;

fn parse_toml(src: &str) -> Result<Table, ProblemError> {
    src.parse::<Table>()
        .map_err(|e| ProblemError::new(ReasonCode::ParseError, e.to_string()))
}

fn get<'a>(t: &'a Table, key: &str, ctx: &str) -> Result<&'a toml::Value, ProblemError> {
    t.get(key)
        .ok_or_else(|| ProblemError::new(ReasonCode::MissingKey, format!("{ctx}: missing `{key}`")))
}

/// A number, or a constant expression string such as `"pi/4"`.
fn as_real(v: &toml::Value, ctx: &str) -> Result<f64, ProblemError> {
    match v {
        toml::Value::Float(f) => Ok(*f),
        toml::Value::Integer(i) => Ok(*i as f64),
        toml::Value::String(s) => {
            let sym = SymbolTable::new(vec![], vec![], None).expect("empty table");
            let e = parse_expression(s, &sym).map_err(|e| expr_err(e, ctx))?;
            Ok(e.eval(&[], &[], 0.0))
        }
        _ => err(ReasonCode::InvalidValue, format!("{ctx}: expected a number")),
    }
}

fn as_reals(v: &toml::Value, ctx: &str) -> Result<Vec<f64>, ProblemError> {
    match v {
        toml::Value::Array(a) => a.iter().map(|x| as_real(x, ctx)).collect(),
        _ => err(ReasonCode::InvalidValue, format!("{ctx}: expected an array of numbers")),
    }
}

fn as_strings(v: &toml::Value, ctx: &str) -> Result<Vec<String>, ProblemError> {
    match v {
        toml::Value::Array(a) => a
            .iter()
            .map(|x| {
                x.as_str()
                    .map(str::to_owned)
                    .ok_or_else(|| ProblemError::new(ReasonCode::InvalidValue, format!("{ctx}: expected strings")))
            })
            .collect(),
        _ => err(ReasonCode::InvalidValue, format!("{ctx}: expected an array of strings")),
    }
}

fn as_table<'a>(v: &'a toml::Value, ctx: &str) -> Result<&'a Table, ProblemError> {
    v.as_table()
        .ok_or_else(|| ProblemError::new(ReasonCode::InvalidValue, format!("{ctx}: expected a table")))
}

fn as_usize(v: &toml::Value, ctx: &str) -> Result<usize, ProblemError> {
    match v.as_integer() {
        Some(i) if i >= 0 => Ok(i as usize),
        _ => err(ReasonCode::InvalidValue, format!("{ctx}: expected a nonnegative integer")),
    }
}

fn expr_err(e: ExprError, ctx: &str) -> ProblemError {
    ProblemError::new(ReasonCode::ParseError, format!("{ctx}: {e}"))
}

fn parse_all(src: &[String], sym: &SymbolTable, ctx: &str) -> Result<Vec<Expr>, ProblemError> {
    src.iter()
        .enumerate()
        .map(|(i, s)| parse_expression(s, sym).map_err(|e| expr_err(e, &format!("{ctx}[{i}]"))))
        .collect()
}

fn load_manifold(t: &Table, n: usize) -> Result<ManifoldModel, ProblemError> {
    let v = get(t, "manifold", "problem")?;
    let model = match v {
        toml::Value::String(name) => ManifoldModel::builtin(name).ok_or_else(|| {
            ProblemError::new(ReasonCode::UnknownManifold, format!("unknown manifold `{name}`"))
        })?,
        toml::Value::Table(mt) => {
            let rows = match get(mt, "metric", "manifold")? {
                toml::Value::Array(a) => a
                    .iter()
                    .map(|r| as_strings(r, "manifold.metric"))
                    .collect::<Result<Vec<_>, _>>()?,
                _ => return err(ReasonCode::InvalidValue, "manifold.metric must be an array"),
            };
            let domain = match (mt.get("domain_lo"), mt.get("domain_hi")) {
                (Some(lo), Some(hi)) => Some(ChartDomain {
                    lo: as_reals(lo, "manifold.domain_lo")?,
                    hi: as_reals(hi, "manifold.domain_hi")?,
                }),
                (None, None) => None,
                _ => return err(ReasonCode::MissingKey, "manifold needs both domain_lo and domain_hi"),
            };
            if let Some(d) = &domain {
                if d.lo.len() != rows.len() || d.hi.len() != rows.len() {
                    return err(ReasonCode::DimensionMismatch, "manifold domain has wrong length");
                }
            }
            ManifoldModel::from_metric_exprs(&rows, domain)
                .map_err(|e| ProblemError::new(ReasonCode::ParseError, e.to_string()))?
        }
        _ => return err(ReasonCode::InvalidValue, "manifold must be a name or a table"),
    };
    if model.dim() != n {
        return err(
            ReasonCode::DimensionMismatch,
            format!("manifold has dimension {}, problem declares n = {n}", model.dim()),
        );
    }
    Ok(model)
}

fn load_control_set(t: &Table, m: usize) -> Result<ControlSetSpec, ProblemError> {
    let cs = as_table(get(t, "control_set", "problem")?, "control_set")?;
    let kind = get(cs, "kind", "control_set")?
        .as_str()
        .ok_or_else(|| ProblemError::new(ReasonCode::InvalidValue, "control_set.kind must be a string"))?;
    let spec = match kind {
        "box" => {
            let lo = as_reals(get(cs, "lo", "control_set")?, "control_set.lo")?;
            let hi = as_reals(get(cs, "hi", "control_set")?, "control_set.hi")?;
            let samples = match cs.get("samples") {
                Some(v) => as_usize(v, "control_set.samples")?,
                None => 5,
            };
            let mut s = ControlSetSpec::boxed(lo, hi, samples)?;
            if let (Some(lo), Some(hi)) = (cs.get("sample_lo"), cs.get("sample_hi")) {
                s = s.with_sample_box(
                    as_reals(lo, "control_set.sample_lo")?,
                    as_reals(hi, "control_set.sample_hi")?,
                );
            }
            s
        }
        "points" => {
            let pts = match get(cs, "points", "control_set")? {
                toml::Value::Array(a) => a
                    .iter()
                    .map(|p| as_reals(p, "control_set.points"))
                    .collect::<Result<Vec<_>, _>>()?,
                _ => return err(ReasonCode::InvalidValue, "control_set.points must be an array"),
            };
            ControlSetSpec::points(pts)?
        }
        other => return err(ReasonCode::InvalidValue, format!("unknown control_set kind `{other}`")),
    };
    if spec.dim() != m {
        return err(ReasonCode::DimensionMismatch, format!("control set has dimension {}, m = {m}", spec.dim()));
    }
    // Sampling must be possible up front so later maximisation cannot fail.
    sample_controls(&spec)?;
    Ok(spec)
}

/// Parses a control given as a constant array or as `[[..segments]]` with `until`/`value`.
pub fn parse_control(
    v: &toml::Value,
    horizon: f64,
    cells: usize,
    m: usize,
    ctx: &str,
) -> Result<ControlSignal, ProblemError> {
    let sig = match v {
        toml::Value::Array(a) if a.iter().all(|x| !x.is_table()) => {
            let u = as_reals(v, ctx)?;
            ControlSignal::constant(horizon, cells, &u)
        }
        toml::Value::Array(a) => {
            let segs = a
                .iter()
                .map(|s| {
                    let st = as_table(s, ctx)?;
                    Ok((
                        as_real(get(st, "until", ctx)?, ctx)?,
                        as_reals(get(st, "value", ctx)?, ctx)?,
                    ))
                })
                .collect::<Result<Vec<_>, ProblemError>>()?;
            ControlSignal::from_segments(horizon, cells, &segs)?
        }
        _ => return err(ReasonCode::InvalidValue, format!("{ctx}: expected an array")),
    };
    if sig.values.iter().any(|u| u.len() != m) {
        return err(ReasonCode::DimensionMismatch, format!("{ctx}: control values must have length {m}"));
    }
    Ok(sig)
}

/// Loads a problem file. See `docs/problem-format.md` for the schema.
pub fn load_problem(src: &str) -> Result<LoadedProblem, ProblemError> {
    load_problem_with_grid(src, None)
}

pub fn load_problem_with_grid(src: &str, grid_override: Option<usize>) -> Result<LoadedProblem, ProblemError> {
    let t = parse_toml(src)?;
    let name = t.get("name").and_then(|v| v.as_str()).unwrap_or("problem").to_owned();
    let n = as_usize(get(&t, "n", "problem")?, "n")?;
    let m = as_usize(get(&t, "m", "problem")?, "m")?;
    if n == 0 || m == 0 {
        return err(ReasonCode::InvalidValue, "n and m must be at least 1");
    }
    let horizon = as_real(get(&t, "T", "problem")?, "T")?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return err(ReasonCode::InvalidValue, "T must be positive");
    }
    let grid_n = match grid_override {
        Some(g) => g,
        None => as_usize(get(&t, "grid_N", "problem")?, "grid_N")?,
    };
    if grid_n < 16 {
        return err(ReasonCode::InvalidValue, "grid_N must be at least 16");
    }
    let manifold = load_manifold(&t, n)?;
    let dyn_src = as_strings(get(&t, "dynamics", "problem")?, "dynamics")?;
    if dyn_src.len() != n {
        return err(
            ReasonCode::DimensionMismatch,
            format!("dynamics has {} entries, n = {n}", dyn_src.len()),
        );
    }
    let dsym = SymbolTable::dynamics(n, m);
    let esym = SymbolTable::endpoint(n);
    let ssym = SymbolTable::state_only(n);
    let dynamics = parse_all(&dyn_src, &dsym, "dynamics")?;
    let control_set = load_control_set(&t, m)?;
    let assume_complete = t
        .get("assume_complete")
        .map(|v| v.as_bool().ok_or_else(|| ProblemError::new(ReasonCode::InvalidValue, "assume_complete must be boolean")))
        .transpose()?
        .unwrap_or(true);
    let lipschitz_box = match t.get("lipschitz") {
        Some(v) => {
            let lt = as_table(v, "lipschitz")?;
            let lo = as_reals(get(lt, "lo", "lipschitz")?, "lipschitz.lo")?;
            let hi = as_reals(get(lt, "hi", "lipschitz")?, "lipschitz.hi")?;
            if lo.len() != n || hi.len() != n {
                return err(ReasonCode::DimensionMismatch, "lipschitz box must have length n");
            }
            Some((lo, hi))
        }
        None => None,
    };
    let reference = match t.get("reference") {
        Some(v) => {
            let rt = as_table(v, "reference")?;
            let x0 = as_reals(get(rt, "x0", "reference")?, "reference.x0")?;
            if x0.len() != n {
                return err(ReasonCode::DimensionMismatch, "reference.x0 must have length n");
            }
            let control = parse_control(get(rt, "control", "reference")?, horizon, grid_n, m, "reference.control")?;
            Some(Reference { x0, control })
        }
        None => None,
    };

    let bolza = t.get("bolza");
    let mut base = ControlProblem {
        name,
        manifold,
        n,
        m,
        horizon,
        grid_n,
        dynamics,
        phi: Vec::new(),
        psi: Vec::new(),
        control_set,
        reference,
        assume_complete,
        lipschitz_box,
    };
    if let Some(r) = &base.reference {
        base.check_signal(&r.control)?;
    }
    match bolza {
        None => {
            let phi_src = as_strings(get(&t, "phi", "problem")?, "phi")?;
            if phi_src.is_empty() {
                return err(ReasonCode::DimensionMismatch, "phi needs at least the cost φ₀");
            }
            let psi_src = match t.get("psi") {
                Some(v) => as_strings(v, "psi")?,
                None => Vec::new(),
            };
            base.phi = parse_all(&phi_src, &esym, "phi")?;
            base.psi = parse_all(&psi_src, &esym, "psi")?;
            Ok(LoadedProblem::Mayer(base))
        }
        Some(bv) => {
            if t.contains_key("phi") || t.contains_key("psi") {
                return err(ReasonCode::InvalidValue, "a bolza problem takes its endpoint data from [bolza]");
            }
            let bt = as_table(bv, "bolza")?;
            let f0_src = get(bt, "f0", "bolza")?
                .as_str()
                .ok_or_else(|| ProblemError::new(ReasonCode::InvalidValue, "bolza.f0 must be a string"))?;
            let f0 = parse_expression(f0_src, &dsym).map_err(|e| expr_err(e, "bolza.f0"))?;
            let h = match bt.get("h") {
                Some(v) => {
                    let s = v
                        .as_str()
                        .ok_or_else(|| ProblemError::new(ReasonCode::InvalidValue, "bolza.h must be a string"))?;
                    parse_expression(s, &ssym).map_err(|e| expr_err(e, "bolza.h"))?
                }
                None => Expr::Const(0.0),
            };
            let list = |key: &str| -> Result<Vec<Expr>, ProblemError> {
                match bt.get(key) {
                    Some(v) => parse_all(&as_strings(v, key)?, &ssym, &format!("bolza.{key}")),
                    None => Ok(Vec::new()),
                }
            };
            let psi1 = list("psi1")?;
            let psi2 = list("psi2")?;
            base.phi = vec![lift_to_endpoint(&h, n, false)];
            base.psi = psi1
                .iter()
                .map(|e| lift_to_endpoint(e, n, true))
                .chain(psi2.iter().map(|e| lift_to_endpoint(e, n, false)))
                .collect();
            Ok(LoadedProblem::Bolza(BolzaProblem {
                base,
                f0,
                h,
                psi1,
                psi2,
            }))
        }
    }
}

/// Second-order data attached to a direction (σ, λ, W) with simplex weights ν.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondOrderSpec {
    pub sigma: Vec<ControlSignal>,
    pub lambda: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    pub nu: Vec<f64>,
}

/// Witness data (τ, β, r) for the quasi-pointwise test.
#[derive(Debug, Clone, PartialEq)]
pub struct PointwiseSpec {
    pub taus: Vec<f64>,
    pub betas: Vec<f64>,
    pub r: Vec<Vec<f64>>,
}

/// Direction file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionSpec {
    pub control: ControlSignal,
    pub v: Vec<f64>,
    pub second_order: Option<SecondOrderSpec>,
    pub pointwise: Option<PointwiseSpec>,
}

pub fn load_direction(src: &str, p: &ControlProblem) -> Result<DirectionSpec, ProblemError> {
    let t = parse_toml(src)?;
    let d = as_table(get(&t, "direction", "direction file")?, "direction")?;
    let control = parse_control(get(d, "control", "direction")?, p.horizon, p.grid_n, p.m, "direction.control")?;
    p.check_signal(&control)?;
    let v = match d.get("V") {
        Some(v) => as_reals(v, "direction.V")?,
        None => vec![0.0; p.n],
    };
    if v.len() != p.n {
        return err(ReasonCode::DimensionMismatch, "direction.V must have length n");
    }
    let second_order = match t.get("second_order") {
        Some(sv) => {
            let st = as_table(sv, "second_order")?;
            // A list of controls, or a single control (constant array or segments).
            let sigma = match get(st, "sigma", "second_order")? {
                toml::Value::Array(a) if !a.is_empty() && a.iter().all(|x| x.is_array()) => a
                    .iter()
                    .map(|x| parse_control(x, p.horizon, p.grid_n, p.m, "second_order.sigma"))
                    .collect::<Result<Vec<_>, _>>()?,
                other => vec![parse_control(other, p.horizon, p.grid_n, p.m, "second_order.sigma")?],
            };
            for s in &sigma {
                p.check_signal(s)?;
            }
            let q = sigma.len();
            let lambda = match st.get("lambda") {
                Some(toml::Value::Array(_)) => as_reals(&st["lambda"], "second_order.lambda")?,
                Some(v) => vec![as_real(v, "second_order.lambda")?],
                None => vec![1.0; q],
            };
            let w = match st.get("W") {
                Some(toml::Value::Array(a)) if a.iter().all(|x| x.is_array()) => a
                    .iter()
                    .map(|x| as_reals(x, "second_order.W"))
                    .collect::<Result<Vec<_>, _>>()?,
                Some(v) => vec![as_reals(v, "second_order.W")?],
                None => vec![vec![0.0; p.n]; q],
            };
            let nu = match st.get("nu") {
                Some(v) => as_reals(v, "second_order.nu")?,
                None => vec![1.0 / q as f64; q],
            };
            if lambda.len() != q || w.len() != q || nu.len() != q || w.iter().any(|x| x.len() != p.n) {
                return err(ReasonCode::DimensionMismatch, "second_order lists must have matching lengths");
            }
            if lambda.iter().any(|l| !(*l > 0.0)) {
                return err(ReasonCode::InvalidValue, "second_order.lambda must be positive");
            }
            if nu.iter().any(|v| *v < 0.0) || (nu.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return err(ReasonCode::InvalidValue, "second_order.nu must lie on the simplex");
            }
            Some(SecondOrderSpec { sigma, lambda, w, nu })
        }
        None => None,
    };
    let pointwise = match t.get("pointwise") {
        Some(pv) => {
            let pt = as_table(pv, "pointwise")?;
            let taus = as_reals(get(pt, "taus", "pointwise")?, "pointwise.taus")?;
            let betas = as_reals(get(pt, "betas", "pointwise")?, "pointwise.betas")?;
            let r = match get(pt, "r", "pointwise")? {
                toml::Value::Array(a) => a
                    .iter()
                    .map(|x| as_reals(x, "pointwise.r"))
                    .collect::<Result<Vec<_>, _>>()?,
                _ => return err(ReasonCode::InvalidValue, "pointwise.r must be an array"),
            };
            if betas.len() != taus.len() || r.len() != taus.len() || r.iter().any(|x| x.len() != p.m) {
                return err(ReasonCode::DimensionMismatch, "pointwise lists must have matching lengths");
            }
            Some(PointwiseSpec { taus, betas, r })
        }
        None => None,
    };
    Ok(DirectionSpec {
        control,
        v,
        second_order,
        pointwise,
    })
}

pub fn load_multiplier(src: &str, p: &ControlProblem) -> Result<Multiplier, ProblemError> {
    let t = parse_toml(src)?;
    let ell_phi = as_reals(get(&t, "ell_phi", "multiplier file")?, "ell_phi")?;
    let ell_psi = match t.get("ell_psi") {
        Some(v) => as_reals(v, "ell_psi")?,
        None => Vec::new(),
    };
    let m = Multiplier::new(ell_phi, ell_psi);
    m.validate(p.phi.len(), p.k())?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    const WARGA: &str = r#"
name = "warga"
manifold = "euclidean:2"
n = 2
m = 2
T = 1.0
grid_N = 64
dynamics = ["x2*(u1+u2)", "u2 - x1"]
phi = ["x1_T"]
psi = ["x1_0", "x2_0", "x2_T"]
[control_set]
kind = "box"
lo = [0, -1]
hi = [1, 1]
samples = 3
[reference]
x0 = [0, 0]
control = [0, 0]
"#;

    #[test]
    fn loads_warga() {
        let p = match load_problem(WARGA).unwrap() {
            LoadedProblem::Mayer(p) => p,
            _ => panic!("expected mayer"),
        };
        assert_eq!((p.n, p.m, p.k(), p.j()), (2, 2, 3, 0));
        assert_eq!(p.f(0.0, &[0.0, 0.0], &[0.0, -1.0]), vec![0.0, -1.0]);
        assert!(p.reference.is_some());
    }

    #[test]
    fn minimal_problem() {
        let src = r#"
manifold = "euclidean:1"
n = 1
m = 1
T = 2
grid_N = 16
dynamics = ["0"]
phi = ["x1_T"]
[control_set]
kind = "points"
points = [[0]]
"#;
        let p = load_problem(src).unwrap();
        assert_eq!(p.base().k(), 0);
    }

    #[test]
    fn reason_codes() {
        let bad_dyn = WARGA.replace(r#"dynamics = ["x2*(u1+u2)", "u2 - x1"]"#, r#"dynamics = ["x2"]"#);
        assert_eq!(load_problem(&bad_dyn).unwrap_err().reason, ReasonCode::DimensionMismatch);
        let missing = WARGA.replace("T = 1.0\n", "");
        assert_eq!(load_problem(&missing).unwrap_err().reason, ReasonCode::MissingKey);
        let bad_expr = WARGA.replace("u2 - x1", "u2 - x3");
        assert_eq!(load_problem(&bad_expr).unwrap_err().reason, ReasonCode::ParseError);
        let bad_m = WARGA.replace("\"euclidean:2\"", "\"klein\"");
        assert_eq!(load_problem(&bad_m).unwrap_err().reason, ReasonCode::UnknownManifold);
        let unb = WARGA.replace("hi = [1, 1]", "hi = [inf, 1]");
        assert_eq!(load_problem(&unb).unwrap_err().reason, ReasonCode::UnboundedAxis);
        let outside = WARGA.replace("control = [0, 0]", "control = [2, 0]");
        assert_eq!(load_problem(&outside).unwrap_err().reason, ReasonCode::InvalidValue);
        assert_eq!(load_problem("n = ").unwrap_err().reason, ReasonCode::ParseError);
    }

    #[test]
    fn sampling_rules() {
        let s = ControlSetSpec::boxed(vec![0.0, -1.0], vec![1.0, 1.0], 3).unwrap();
        let pts = sample_controls(&s).unwrap();
        assert_eq!(pts.len(), 9);
        for c in [[0.0, -1.0], [0.0, 1.0], [1.0, -1.0], [1.0, 1.0]] {
            assert!(pts.iter().any(|p| p[..] == c[..]));
        }
        let s2 = ControlSetSpec::boxed(vec![0.0], vec![1.0], 2).unwrap();
        assert_eq!(sample_controls(&s2).unwrap(), vec![vec![0.0], vec![1.0]]);
        let s3 = ControlSetSpec::points(vec![vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(sample_controls(&s3).unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let s4 = ControlSetSpec::boxed(vec![0.0], vec![f64::INFINITY], 3).unwrap();
        assert_eq!(sample_controls(&s4).unwrap_err().reason, ReasonCode::UnboundedAxis);
        let s5 = s4.with_sample_box(vec![0.0], vec![2.0]);
        assert_eq!(sample_controls(&s5).unwrap(), vec![vec![0.0], vec![1.0], vec![2.0]]);
    }

    #[test]
    fn segments_and_refinement() {
        let u = ControlSignal::from_segments(1.0, 4, &[(0.5, vec![-1.0]), (1.0, vec![1.0])]).unwrap();
        assert_eq!(u.values, vec![vec![-1.0], vec![-1.0], vec![1.0], vec![1.0]]);
        assert_eq!(u.breakpoints(), vec![2]);
        let r = u.refined(2);
        assert_eq!(r.cells(), 8);
        assert_eq!(r.at(0.49), &[-1.0]);
        assert_eq!(r.at(1.0), &[1.0]);
    }

    #[test]
    fn multiplier_rules() {
        let m = Multiplier::new(vec![-2.0], vec![2.0, 0.0, 0.0]);
        assert!(m.validate(1, 3).is_ok());
        assert_eq!(m.normalized().flat(), vec![-1.0, 1.0, 0.0, 0.0]);
        assert!(m.is_normal(1e-9));
        assert!(Multiplier::new(vec![0.0], vec![0.0]).validate(1, 1).is_err());
        assert!(Multiplier::new(vec![0.5], vec![]).validate(1, 0).is_err());
    }

    const BOLZA: &str = r#"
manifold = "euclidean:2"
n = 2
m = 2
T = 1
grid_N = 32
dynamics = ["u1", "u2"]
[control_set]
kind = "box"
lo = [-1, -1]
hi = [1, 1]
[bolza]
f0 = "0.5*(u1^2+u2^2)"
h = "0"
psi1 = ["x1", "x2"]
psi2 = ["x1 - 1", "x2"]
"#;

    #[test]
    fn mayerize_bookkeeping() {
        let b = match load_problem(BOLZA).unwrap() {
            LoadedProblem::Bolza(b) => b,
            _ => panic!(),
        };
        assert_eq!(b.base.psi.len(), 4);
        let mp = mayerize(&b);
        assert_eq!(mp.n, 3);
        assert_eq!(mp.psi.len(), 1 + 2 + 2);
        assert_eq!(mp.manifold.dim(), 3);
        // φ₀' = x⁰(T) + h
        let args = [0.0, 0.0, 0.0, 0.7, 1.0, 0.0];
        assert_eq!(mp.phi[0].eval(&args, &[], 0.0), 0.7);
        assert_eq!(mp.psi[3].eval(&args, &[], 0.0), 0.0);
        assert_eq!(mp.f(0.0, &[0.0, 0.0, 0.0], &[1.0, 2.0]), vec![2.5, 1.0, 2.0]);
    }

    #[test]
    fn lipschitz_sampling() {
        let src = WARGA.replace("[reference]\nx0 = [0, 0]\ncontrol = [0, 0]\n", "");
        let p = load_problem(&src).unwrap().base().clone();
        let est = estimate_lipschitz(&p, &[-1.0, -1.0], &[1.0, 1.0], 500, 7).unwrap();
        // |∂f/∂x| ≤ sqrt(4 + 1) on this box.
        assert!(est.constant > 1.0 && est.constant <= 5f64.sqrt() + 1e-9, "{}", est.constant);
    }

    #[test]
    fn direction_file() {
        let p = load_problem(WARGA).unwrap().base().clone();
        let src = r#"
[direction]
control = [{ until = 0.5, value = [1, -1] }, { until = 1.0, value = [1, 1] }]
V = [0, 0]
[second_order]
sigma = [0, 1]
lambda = 1
[pointwise]
taus = [0.25, 0.75]
betas = [1, 1]
r = [[1, -1], [1, 1]]
"#;
        let d = load_direction(src, &p).unwrap();
        assert_eq!(d.control.values[0], vec![1.0, -1.0]);
        assert_eq!(d.control.values[63], vec![1.0, 1.0]);
        let so = d.second_order.unwrap();
        assert_eq!(so.sigma.len(), 1);
        assert_eq!(so.nu, vec![1.0]);
        assert_eq!(d.pointwise.unwrap().r.len(), 2);
        let mult = load_multiplier("ell_phi = [-1]\nell_psi = [1, 0, 0]\n", &p).unwrap();
        assert_eq!(mult.flat(), vec![-1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn expression_numbers() {
        let src = WARGA.replace("x0 = [0, 0]", "x0 = [\"pi - pi\", 0]");
        assert!(load_problem(&src).is_ok());
    }
}
