#![allow(dead_code)]

//! Oracles written directly against the formulas, sharing no code with the library.

use nalgebra::{DMatrix, DVector};

/// Flat ℝⁿ problem with hand-written derivatives.
pub struct FlatProblem {
    pub n: usize,
    pub f: Box<dyn Fn(&[f64], &[f64]) -> DVector<f64>>,
    /// ∂f/∂x.
    pub jac: Box<dyn Fn(&[f64], &[f64]) -> DMatrix<f64>>,
    /// ∂²f_k/∂x², one matrix per component k.
    pub hess: Box<dyn Fn(&[f64], &[f64]) -> Vec<DMatrix<f64>>>,
    /// Gradient of the endpoint Lagrangian in x(T).
    pub lag_grad_t: Box<dyn Fn(&[f64], &[f64]) -> DVector<f64>>,
    /// Hessian of the endpoint Lagrangian in (x(0), x(T)), 2n × 2n.
    pub lag_hess: Box<dyn Fn(&[f64], &[f64]) -> DMatrix<f64>>,
}

fn rk4<F: Fn(&DVector<f64>, usize) -> DVector<f64>>(y: &DVector<f64>, h: f64, cell: usize, f: &F) -> DVector<f64> {
    let k1 = f(y, cell);
    let k2 = f(&(y + &k1 * (h / 2.0)), cell);
    let k3 = f(&(y + &k2 * (h / 2.0)), cell);
    let k4 = f(&(y + &k3 * h), cell);
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Half of the second variation: ∫ ½pᵀ∂²f(X,X) + pᵀ(∂f(u) − ∂f(ū))X dt + ½ D²𝓛((V, X(T))).
///
/// Controls are constant on each of `cells` equal cells; each cell is split into
/// `sub` Simpson panels.
pub fn flat_second_variation(
    fp: &FlatProblem,
    x0: &[f64],
    horizon: f64,
    ubar: &[Vec<f64>],
    u: &[Vec<f64>],
    v: &[f64],
    sub: usize,
) -> f64 {
    let n = fp.n;
    let cells = ubar.len();
    let steps = cells * sub * 2;
    let h = horizon / steps as f64;
    let cell_of = |k: usize| (k / (2 * sub)).min(cells - 1);

    // Forward (x̄, X).
    let fwd = |y: &DVector<f64>, c: usize| {
        let x = y.rows(0, n).into_owned();
        let xx = y.rows(n, n).into_owned();
        let xs = x.as_slice();
        let fb = (fp.f)(xs, &ubar[c]);
        let a = (fp.jac)(xs, &ubar[c]);
        let dx = &a * &xx + (fp.f)(xs, &u[c]) - &fb;
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&fb);
        out.rows_mut(n, n).copy_from(&dx);
        out
    };
    let mut y = DVector::zeros(2 * n);
    y.rows_mut(0, n).copy_from_slice(x0);
    y.rows_mut(n, n).copy_from_slice(v);
    let mut states = vec![y.clone()];
    for k in 0..steps {
        y = rk4(&y, h, cell_of(k), &fwd);
        states.push(y.clone());
    }
    let xt = states[steps].rows(0, n).into_owned();
    let big_xt = states[steps].rows(n, n).into_owned();

    // Backward (x̄, p) from p(T) = ∇_T 𝓛, ṗ = −∂fᵀ p.
    let bwd = |y: &DVector<f64>, c: usize| {
        let x = y.rows(0, n).into_owned();
        let p = y.rows(n, n).into_owned();
        let xs = x.as_slice();
        let a = (fp.jac)(xs, &ubar[c]);
        let mut out = DVector::zeros(2 * n);
        out.rows_mut(0, n).copy_from(&(-(fp.f)(xs, &ubar[c])));
        out.rows_mut(n, n).copy_from(&(a.transpose() * p));
        out
    };
    let mut z = DVector::zeros(2 * n);
    z.rows_mut(0, n).copy_from(&xt);
    z.rows_mut(n, n).copy_from(&(fp.lag_grad_t)(x0, xt.as_slice()));
    let mut costates = vec![DVector::zeros(n); steps + 1];
    costates[steps] = z.rows(n, n).into_owned();
    for k in (0..steps).rev() {
        z = rk4(&z, h, cell_of(k), &bwd);
        costates[k] = z.rows(n, n).into_owned();
    }

    let integrand = |k: usize, c: usize| {
        let x = states[k].rows(0, n).into_owned();
        let xx = states[k].rows(n, n).into_owned();
        let p = &costates[k];
        let hs = (fp.hess)(x.as_slice(), &ubar[c]);
        let mut q = 0.0;
        for (pk, hk) in p.iter().zip(&hs) {
            q += 0.5 * pk * (xx.transpose() * hk * &xx)[(0, 0)];
        }
        let da = (fp.jac)(x.as_slice(), &u[c]) - (fp.jac)(x.as_slice(), &ubar[c]);
        q + p.dot(&(da * &xx))
    };
    let mut total = 0.0;
    for j in 0..steps / 2 {
        let (a, m, b) = (2 * j, 2 * j + 1, 2 * j + 2);
        let c = cell_of(a);
        total += (2.0 * h) / 6.0 * (integrand(a, c) + 4.0 * integrand(m, c) + integrand(b, c));
    }
    let mut w = DVector::zeros(2 * n);
    w.rows_mut(0, n).copy_from_slice(v);
    w.rows_mut(n, n).copy_from(&big_xt);
    total + 0.5 * (w.transpose() * (fp.lag_hess)(x0, xt.as_slice()) * &w)[(0, 0)]
}

/// Smallest |Σ_E h − ρΣh|·width over all subsets E of exactly `count` cells.
pub fn brute_force_residual(rows: &[Vec<f64>], rho: f64, count: usize, width: f64) -> f64 {
    let n = rows.len();
    let d = rows[0].len();
    let target: Vec<f64> = (0..d).map(|j| rho * rows.iter().map(|r| r[j]).sum::<f64>()).collect();
    let mut best = f64::INFINITY;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize != count {
            continue;
        }
        let mut s = vec![0.0; d];
        for (i, r) in rows.iter().enumerate() {
            if mask >> i & 1 == 1 {
                for j in 0..d {
                    s[j] += r[j];
                }
            }
        }
        let e: f64 = s.iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() * width;
        best = best.min(e);
    }
    best
}

/// Warga data in the oracle's form: f = (x₂(u₁+u₂), u₂ − x₁), 𝓛 = ℓ₀x₁(T) + ℓ₁x₁(0) + ℓ₂x₂(0) + ℓ₃x₂(T).
pub fn warga_flat(ell: [f64; 4]) -> FlatProblem {
    FlatProblem {
        n: 2,
        f: Box::new(|x, u| DVector::from_vec(vec![x[1] * (u[0] + u[1]), u[1] - x[0]])),
        jac: Box::new(|_, u| DMatrix::from_row_slice(2, 2, &[0.0, u[0] + u[1], -1.0, 0.0])),
        hess: Box::new(|_, _| vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)]),
        lag_grad_t: Box::new(move |_, _| DVector::from_vec(vec![ell[0], ell[3]])),
        lag_hess: Box::new(|_, _| DMatrix::zeros(4, 4)),
    }
}

/// Double integrator with 𝓛 = ℓ₀·½|x(T)|² + ℓ₁x₁(0) + ℓ₂x₂(0).
pub fn flat_lq_flat(l0: f64) -> FlatProblem {
    FlatProblem {
        n: 2,
        f: Box::new(|x, u| DVector::from_vec(vec![x[1], u[0]])),
        jac: Box::new(|_, _| DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])),
        hess: Box::new(|_, _| vec![DMatrix::zeros(2, 2), DMatrix::zeros(2, 2)]),
        lag_grad_t: Box::new(move |_, xt| DVector::from_vec(vec![l0 * xt[0], l0 * xt[1]])),
        lag_hess: Box::new(move |_, _| {
            let mut m = DMatrix::zeros(4, 4);
            m[(2, 2)] = l0;
            m[(3, 3)] = l0;
            m
        }),
    }
}

/// A nonlinear planar family: f = (x₂ + a·u·x₁², −b·sin x₁ + u(1 + c·x₂²)),
/// φ₀ = 0, ψ = (q, x₂(T)) with q = x₁(T)² + x₁(T)x₂(T) + s·x₁(0)x₂(0), so
/// 𝓛 = ℓ_q·q + ℓ₁x₂(T) and any ℓ₀ ≤ 0 is admissible.
pub struct Nonlinear {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub s: f64,
}

impl Nonlinear {
    pub fn dynamics(&self) -> [String; 2] {
        [
            format!("x2 + ({})*u1*x1^2", self.a),
            format!("-({})*sin(x1) + u1*(1 + ({})*x2^2)", self.b, self.c),
        ]
    }

    pub fn q(&self) -> String {
        format!("x1_T^2 + x1_T*x2_T + ({})*x1_0*x2_0", self.s)
    }

    pub fn flat(&self, lq: f64, l1: f64) -> FlatProblem {
        let (a, b, c, s) = (self.a, self.b, self.c, self.s);
        FlatProblem {
            n: 2,
            f: Box::new(move |x, u| DVector::from_vec(vec![x[1] + a * u[0] * x[0] * x[0], -b * x[0].sin() + u[0] * (1.0 + c * x[1] * x[1])])),
            jac: Box::new(move |x, u| {
                DMatrix::from_row_slice(2, 2, &[2.0 * a * u[0] * x[0], 1.0, -b * x[0].cos(), 2.0 * c * u[0] * x[1]])
            }),
            hess: Box::new(move |x, u| {
                vec![
                    DMatrix::from_row_slice(2, 2, &[2.0 * a * u[0], 0.0, 0.0, 0.0]),
                    DMatrix::from_row_slice(2, 2, &[b * x[0].sin(), 0.0, 0.0, 2.0 * c * u[0]]),
                ]
            }),
            lag_grad_t: Box::new(move |_, xt| DVector::from_vec(vec![lq * (2.0 * xt[0] + xt[1]), lq * xt[0] + l1])),
            lag_hess: Box::new(move |_, _| {
                let mut m = DMatrix::zeros(4, 4);
                m[(0, 1)] = lq * s;
                m[(1, 0)] = lq * s;
                m[(2, 2)] = 2.0 * lq;
                m[(2, 3)] = lq;
                m[(3, 2)] = lq;
                m
            }),
        }
    }

    pub fn toml(&self, x0: [f64; 2], ubar: f64, grid: usize) -> String {
        let [d1, d2] = self.dynamics();
        format!(
            r#"
name = "nonlinear"
manifold = "euclidean:2"
n = 2
m = 1
T = 1.0
grid_N = {grid}
dynamics = ["{d1}", "{d2}"]
phi = ["0"]
psi = ["{q}", "x2_T"]
[control_set]
kind = "box"
lo = [-2]
hi = [2]
[reference]
x0 = [{x00}, {x01}]
control = [{ubar}]
"#,
            q = self.q(),
            x00 = x0[0],
            x01 = x0[1],
        )
    }
}
