use crate::expr::{parse_expression, SymbolTable};
use crate::geometry::ManifoldModel;
use crate::problem::{ControlProblem, ControlSetSpec};

/// Problem with the given dynamics, φ₀ = 0, no ψ and a wide control box.
pub fn simple_problem(model: ManifoldModel, dynamics: &[&str], m: usize, horizon: f64, grid: usize) -> ControlProblem {
    let n = model.dim();
    let sym = SymbolTable::dynamics(n, m);
    ControlProblem {
        name: "test".into(),
        manifold: model,
        n,
        m,
        horizon,
        grid_n: grid,
        dynamics: dynamics.iter().map(|s| parse_expression(s, &sym).unwrap()).collect(),
        phi: vec![parse_expression("0", &SymbolTable::endpoint(n)).unwrap()],
        psi: vec![],
        control_set: ControlSetSpec::boxed(vec![-10.0; m], vec![10.0; m], 3).unwrap(),
        reference: None,
        assume_complete: true,
        lipschitz_box: None,
    }
}

pub fn endpoint_exprs(n: usize, src: &[&str]) -> Vec<crate::expr::Expr> {
    let sym = SymbolTable::endpoint(n);
    src.iter().map(|s| parse_expression(s, &sym).unwrap()).collect()
}
