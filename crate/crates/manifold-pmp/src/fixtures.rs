//! Problem files shipped with the crate.

use crate::problem::{load_direction, load_multiplier, load_problem, BolzaProblem, ControlProblem, DirectionSpec, LoadedProblem, Multiplier};

pub const WARGA: &str = include_str!("../fixtures/warga.toml");
pub const WARGA_DIRECTION: &str = include_str!("../fixtures/warga_direction.toml");
pub const WARGA_MULTIPLIER: &str = include_str!("../fixtures/warga_multiplier.toml");
pub const SPHERE_GEODESIC: &str = include_str!("../fixtures/sphere_geodesic.toml");
pub const SPHERE_MULTIPLIER: &str = include_str!("../fixtures/sphere_multiplier.toml");
pub const FLAT_LQ: &str = include_str!("../fixtures/flat_lq.toml");
pub const FLAT_LQ_DIRECTION: &str = include_str!("../fixtures/flat_lq_direction.toml");
pub const FLAT_LQ_MULTIPLIER: &str = include_str!("../fixtures/flat_lq_multiplier.toml");

/// Looks up a bundled file by name, e.g. `"warga"` or `"warga_direction"`.
pub fn by_name(name: &str) -> Option<&'static str> {
    let name = name.strip_suffix(".toml").unwrap_or(name);
    Some(match name {
        "warga" => WARGA,
        "warga_direction" => WARGA_DIRECTION,
        "warga_multiplier" => WARGA_MULTIPLIER,
        "sphere_geodesic" => SPHERE_GEODESIC,
        "sphere_multiplier" => SPHERE_MULTIPLIER,
        "flat_lq" => FLAT_LQ,
        "flat_lq_direction" => FLAT_LQ_DIRECTION,
        "flat_lq_multiplier" => FLAT_LQ_MULTIPLIER,
        _ => return None,
    })
}

fn mayer(src: &str) -> ControlProblem {
    match load_problem(src).expect("bundled fixture parses") {
        LoadedProblem::Mayer(p) => p,
        LoadedProblem::Bolza(_) => panic!("bundled fixture is not a Mayer problem"),
    }
}

pub fn warga() -> ControlProblem {
    mayer(WARGA)
}

pub fn warga_direction(p: &ControlProblem) -> DirectionSpec {
    load_direction(WARGA_DIRECTION, p).expect("bundled direction parses")
}

pub fn warga_multiplier(p: &ControlProblem) -> Multiplier {
    load_multiplier(WARGA_MULTIPLIER, p).expect("bundled multiplier parses")
}

pub fn flat_lq() -> ControlProblem {
    mayer(FLAT_LQ)
}

pub fn flat_lq_direction(p: &ControlProblem) -> DirectionSpec {
    load_direction(FLAT_LQ_DIRECTION, p).expect("bundled direction parses")
}

pub fn flat_lq_multiplier(p: &ControlProblem) -> Multiplier {
    load_multiplier(FLAT_LQ_MULTIPLIER, p).expect("bundled multiplier parses")
}

pub fn sphere_geodesic() -> BolzaProblem {
    match load_problem(SPHERE_GEODESIC).expect("bundled fixture parses") {
        LoadedProblem::Bolza(b) => b,
        LoadedProblem::Mayer(_) => panic!("bundled fixture is not a Bolza problem"),
    }
}

pub fn sphere_multiplier(b: &BolzaProblem) -> Multiplier {
    load_multiplier(SPHERE_MULTIPLIER, &b.base).expect("bundled multiplier parses")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_fixtures_load() {
        let w = warga();
        assert_eq!(w.grid_n, 1024);
        let d = warga_direction(&w);
        assert!(d.second_order.is_some() && d.pointwise.is_some());
        assert_eq!(warga_multiplier(&w).flat(), vec![-1.0, 1.0, 0.0, 0.0]);
        let f = flat_lq();
        flat_lq_direction(&f);
        flat_lq_multiplier(&f);
        let s = sphere_geodesic();
        assert_eq!(sphere_multiplier(&s).flat().len(), 5);
        assert!(by_name("warga.toml").is_some() && by_name("nope").is_none());
    }
}
