//! First and second covariant derivatives of endpoint functions at
//! (x̄(0), x̄(T)), expressed in the transported frame at each end.

use nalgebra::{DMatrix, DVector};

use crate::expr::Expr;
use crate::geometry::Christoffel;
use crate::problem::{ControlProblem, Multiplier};
use crate::trajectory::{ReferenceData, Station};

/// Value, framed gradient and framed covariant Hessian of φ(x₁, x₂).
#[derive(Debug, Clone, PartialEq)]
pub struct EndpointJet {
    pub value: f64,
    pub grad1: DVector<f64>,
    pub grad2: DVector<f64>,
    pub hess11: DMatrix<f64>,
    pub hess12: DMatrix<f64>,
    pub hess22: DMatrix<f64>,
}

impl EndpointJet {
    pub fn zero(n: usize) -> Self {
        Self {
            value: 0.0,
            grad1: DVector::zeros(n),
            grad2: DVector::zeros(n),
            hess11: DMatrix::zeros(n, n),
            hess12: DMatrix::zeros(n, n),
            hess22: DMatrix::zeros(n, n),
        }
    }

    /// ∇₁φ(V) + ∇₂φ(X).
    pub fn first(&self, v: &DVector<f64>, x: &DVector<f64>) -> f64 {
        self.grad1.dot(v) + self.grad2.dot(x)
    }

    /// ∇₁²φ(V,V) + 2∇₂∇₁φ(V,X) + ∇₂²φ(X,X).
    pub fn second(&self, v: &DVector<f64>, x: &DVector<f64>) -> f64 {
        v.dot(&(&self.hess11 * v)) + 2.0 * v.dot(&(&self.hess12 * x)) + x.dot(&(&self.hess22 * x))
    }

    fn axpy(&mut self, c: f64, o: &EndpointJet) {
        self.value += c * o.value;
        self.grad1 += &o.grad1 * c;
        self.grad2 += &o.grad2 * c;
        self.hess11 += &o.hess11 * c;
        self.hess12 += &o.hess12 * c;
        self.hess22 += &o.hess22 * c;
    }
}

fn covariant_block(h: &DMatrix<f64>, grad: &[f64], c: &Christoffel, off: usize, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |a, b| {
        h[(off + a, off + b)] - (0..n).map(|k| c.get(k, a, b) * grad[off + k]).sum::<f64>()
    })
}

/// Jet of one endpoint expression over the table `x{i}_0, x{i}_T`.
pub fn endpoint_jet(
    e: &Expr,
    x0: &[f64],
    xt: &[f64],
    frames: (&DMatrix<f64>, &DMatrix<f64>),
    christoffel: (&Christoffel, &Christoffel),
) -> EndpointJet {
    let n = x0.len();
    let args = ControlProblem::endpoint_args(x0, xt);
    let value = e.eval(&args, &[], 0.0);
    let grad = e.grad_state(&args, &[], 0.0);
    let hv = e.hessian_state(&args, &[], 0.0);
    let h = DMatrix::from_fn(2 * n, 2 * n, |a, b| hv[a][b]);
    let (e0, et) = frames;
    let g1 = DVector::from_column_slice(&grad[..n]);
    let g2 = DVector::from_column_slice(&grad[n..]);
    let h11 = covariant_block(&h, &grad, christoffel.0, 0, n);
    let h22 = covariant_block(&h, &grad, christoffel.1, n, n);
    let h12 = h.view((0, n), (n, n)).into_owned();
    let sym = |m: DMatrix<f64>| (&m + m.transpose()) * 0.5;
    EndpointJet {
        value,
        grad1: e0.transpose() * g1,
        grad2: et.transpose() * g2,
        hess11: sym(e0.transpose() * h11 * e0),
        hess12: e0.transpose() * h12 * et,
        hess22: sym(et.transpose() * h22 * et),
    }
}

/// Jets of every φ_i and ψ_r at the reference endpoints.
#[derive(Debug, Clone)]
pub struct EndpointJets {
    pub phi: Vec<EndpointJet>,
    pub psi: Vec<EndpointJet>,
}

impl EndpointJets {
    pub fn at_reference(p: &ControlProblem, rd: &ReferenceData) -> Self {
        let x0 = rd.traj.nodes[0].as_slice();
        let xt = rd.traj.final_point().as_slice();
        let last = rd.cells() - 1;
        let c0 = &rd.fd.station(0, Station::Left).christoffel;
        let ct = &rd.fd.station(last, Station::Right).christoffel;
        let jet = |e: &Expr| endpoint_jet(e, x0, xt, (rd.e0(), rd.e_t()), (c0, ct));
        Self {
            phi: p.phi.iter().map(jet).collect(),
            psi: p.psi.iter().map(jet).collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.phi[0].grad1.len()
    }

    /// Jet of 𝓛 = Σ ℓ_i φ_i + ℓ_ψ·ψ.
    pub fn lagrangian(&self, ell: &Multiplier) -> EndpointJet {
        let mut out = EndpointJet::zero(self.n());
        for (c, j) in ell.ell_phi.iter().zip(&self.phi) {
            out.axpy(*c, j);
        }
        for (c, j) in ell.ell_psi.iter().zip(&self.psi) {
            out.axpy(*c, j);
        }
        out
    }
}
