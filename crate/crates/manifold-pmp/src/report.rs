//! Versioned JSON reports. Field order follows struct declaration order, so
//! the output is stable across runs apart from `version` and `elapsed_seconds`.

use serde::Serialize;

use crate::needle::{convergence_order, ConvergenceOrder, NeedleSample};
use crate::pmp::PmpReport;
use crate::problem::Multiplier;
use crate::second_order::{BolzaFeasibility, HypothesisReport, SecondOrderReport, SecondOrderTerms, Verdict};
use crate::selftest::SelfTestReport;

pub const SCHEMA: &str = "manifold-pmp/report";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PmpSection {
    pub verdict: Verdict,
    /// "supplied" when a multiplier file was given, otherwise "search".
    pub source: String,
    pub candidates: usize,
    pub best_residual: Option<f64>,
    pub message: Option<String>,
    pub multipliers: Vec<PmpReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegralSection {
    pub verdict: Verdict,
    pub lhs: f64,
    pub tolerance: f64,
    pub terms: SecondOrderTerms,
    pub multiplier: Multiplier,
    /// max over rows of the first-order criticality test.
    pub criticality_residual: f64,
    /// Multipliers evaluated; the reported one has the smallest lhs.
    pub candidates: usize,
    pub bolza: Option<BolzaSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BolzaSection {
    pub mayer_lhs: f64,
    pub route_gap: f64,
    pub feasibility: BolzaFeasibility,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointwiseSection {
    pub verdict: Verdict,
    /// False when a hypothesis failed; the verdict is then pass by default.
    pub applicable: bool,
    pub lhs: f64,
    pub tolerance: f64,
    pub terms: SecondOrderTerms,
    pub multiplier: Multiplier,
    pub taus: Vec<f64>,
    pub betas: Vec<f64>,
    pub r: Vec<Vec<f64>>,
    pub nodes: Vec<usize>,
    pub hypotheses: HypothesisReport,
}

const PARTITION_FLOOR: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeedleSection {
    pub verdict: Verdict,
    pub fine_cells: usize,
    pub first_order: Option<ConvergenceOrder>,
    pub min_first_order_slope: f64,
    /// Every first defect is within the partition noise floor.
    pub first_at_partition_floor: bool,
    /// second_defect / ε² in decreasing ε order.
    pub second_ratios: Vec<f64>,
    pub second_non_increasing: bool,
    pub samples: Vec<NeedleSample>,
}

impl NeedleSection {
    /// Pass when the first-order defect decays with slope at least
    /// `min_slope` and second_defect / ε² does not grow as ε shrinks.
    /// Defects within PARTITION_FLOOR × the sample's set residual are
    /// discretization noise: all-noise first defects count as exact, and
    /// noise-level second defects are left out of the monotonicity check.
    pub fn evaluate(fine_cells: usize, mut samples: Vec<NeedleSample>, min_slope: f64) -> Self {
        samples.sort_by(|a, b| b.eps.total_cmp(&a.eps));
        let pos: Vec<&NeedleSample> = samples.iter().filter(|s| s.eps > 0.0).collect();
        let floor = |s: &NeedleSample| PARTITION_FLOOR * s.set_residuals.iter().fold(0.0f64, |a, r| a.max(*r));
        let eps: Vec<f64> = pos.iter().map(|s| s.eps).collect();
        let first: Vec<f64> = pos.iter().map(|s| s.first_defect).collect();
        let first_order = convergence_order(&eps, &first).ok();
        let second_ratios: Vec<f64> = pos.iter().map(|s| s.second_defect / (s.eps * s.eps)).collect();
        let second_non_increasing = (1..pos.len())
            .filter(|&k| pos[k].second_defect > floor(pos[k]))
            .all(|k| second_ratios[k] <= second_ratios[k - 1] * (1.0 + 1e-9) + 1e-15);
        let at_floor = !pos.is_empty() && pos.iter().all(|s| s.first_defect <= floor(s));
        let first_ok = at_floor
            || match first_order {
                Some(ConvergenceOrder::Exact) => true,
                Some(ConvergenceOrder::Slope(s)) => s >= min_slope,
                None => false,
            };
        let ok = first_ok && second_non_increasing && second_ratios.iter().all(|r| r.is_finite());
        Self {
            verdict: if ok { Verdict::Pass } else { Verdict::Fail },
            fine_cells,
            first_order,
            min_first_order_slope: min_slope,
            first_at_partition_floor: at_floor,
            second_ratios,
            second_non_increasing,
            samples,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GeometrySection {
    pub verdict: Verdict,
    pub results: Vec<SelfTestReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub schema: &'static str,
    pub schema_version: u32,
    pub version: &'static str,
    pub command: String,
    pub problem: Option<String>,
    pub grid_n: Option<usize>,
    pub elapsed_seconds: f64,
    pub verdict: Verdict,
    pub pmp: Option<PmpSection>,
    pub second_order: Option<IntegralSection>,
    pub pointwise: Option<PointwiseSection>,
    pub needle: Option<NeedleSection>,
    pub geometry: Option<GeometrySection>,
}

impl Report {
    pub fn new(command: &str) -> Self {
        Self {
            schema: SCHEMA,
            schema_version: SCHEMA_VERSION,
            version: env!("CARGO_PKG_VERSION"),
            command: command.into(),
            problem: None,
            grid_n: None,
            elapsed_seconds: 0.0,
            verdict: Verdict::Pass,
            pmp: None,
            second_order: None,
            pointwise: None,
            needle: None,
            geometry: None,
        }
    }

    /// Recomputes the overall verdict: pass iff every present section passes.
    pub fn finish(&mut self) {
        let vs = [
            self.pmp.as_ref().map(|s| s.verdict),
            self.second_order.as_ref().map(|s| s.verdict),
            self.pointwise.as_ref().map(|s| s.verdict),
            self.needle.as_ref().map(|s| s.verdict),
            self.geometry.as_ref().map(|s| s.verdict),
        ];
        self.verdict = if vs.iter().flatten().all(|v| v.passed()) { Verdict::Pass } else { Verdict::Fail };
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Summary rows (section, quantity, value, verdict) for terminal output.
    pub fn summary_rows(&self) -> Vec<[String; 4]> {
        let mut rows = Vec::new();
        let v = |x: Verdict| if x.passed() { "pass".to_string() } else { "FAIL".to_string() };
        if let Some(s) = &self.pmp {
            rows.push(["pmp".into(), "multipliers".into(), s.multipliers.len().to_string(), v(s.verdict)]);
            for (i, m) in s.multipliers.iter().enumerate() {
                rows.push([
                    format!("pmp[{i}]"),
                    "l (r_H, r_tr)".into(),
                    format!("{:?} ({:.2e}, {:.2e})", m.multiplier.flat(), m.residuals.hamiltonian, m.residuals.transversality),
                    v(Verdict::from_bool(m.verdicts.pass)),
                ]);
            }
        }
        if let Some(s) = &self.second_order {
            rows.push(["second-order".into(), "lhs".into(), format!("{:.6e}", s.lhs), v(s.verdict)]);
            rows.push(["second-order".into(), "hessian/cross".into(), format!("{:.4e} / {:.4e}", s.terms.hessian, s.terms.cross), String::new()]);
            rows.push(["second-order".into(), "curvature/boundary".into(), format!("{:.4e} / {:.4e}", s.terms.curvature, s.terms.boundary), String::new()]);
            if let Some(b) = &s.bolza {
                rows.push(["second-order".into(), "route gap".into(), format!("{:.2e}", b.route_gap), String::new()]);
            }
        }
        if let Some(s) = &self.pointwise {
            rows.push(["pointwise".into(), "lhs".into(), format!("{:.6e}", s.lhs), v(s.verdict)]);
            let failed = if s.hypotheses.failed.is_empty() { "none".to_string() } else { s.hypotheses.failed.join(", ") };
            rows.push(["pointwise".into(), "failed hypotheses".into(), failed, String::new()]);
        }
        if let Some(s) = &self.needle {
            let slope = match s.first_order {
                _ if s.first_at_partition_floor => "at partition floor".into(),
                Some(ConvergenceOrder::Slope(x)) => format!("{x:.3}"),
                Some(ConvergenceOrder::Exact) => "exact".into(),
                None => "n/a".into(),
            };
            rows.push(["needle".into(), "first-order slope".into(), slope, v(s.verdict)]);
            let ratios: Vec<String> = s.second_ratios.iter().map(|r| format!("{r:.3e}")).collect();
            rows.push(["needle".into(), "second defect / eps^2".into(), ratios.join(" "), String::new()]);
        }
        if let Some(s) = &self.geometry {
            for r in &s.results {
                for c in &r.checks {
                    rows.push([r.manifold.clone(), c.name.clone(), format!("{:.2e}", c.max_error), v(Verdict::from_bool(c.pass))]);
                }
            }
        }
        rows.push(["overall".into(), String::new(), String::new(), v(self.verdict)]);
        rows
    }

    pub fn summary_table(&self) -> String {
        let rows = self.summary_rows();
        let mut w = [0usize; 4];
        for r in &rows {
            for (i, c) in r.iter().enumerate() {
                w[i] = w[i].max(c.chars().count());
            }
        }
        let mut out = String::new();
        for r in &rows {
            let line: Vec<String> = r.iter().enumerate().map(|(i, c)| format!("{c:<width$}", width = w[i])).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

impl IntegralSection {
    pub fn from_report(r: &SecondOrderReport, criticality_residual: f64) -> Self {
        Self {
            verdict: r.verdict,
            lhs: r.lhs,
            tolerance: r.tolerance,
            terms: r.terms,
            multiplier: r.multiplier.clone(),
            criticality_residual,
            candidates: 1,
            bolza: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_valid_json() {
        let mut r = Report::new("check-pmp");
        r.pmp = Some(PmpSection {
            verdict: Verdict::Fail,
            source: "search".into(),
            candidates: 0,
            best_residual: None,
            message: Some("no multiplier found at this resolution".into()),
            multipliers: vec![],
        });
        r.finish();
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(v["pmp"]["multipliers"], serde_json::json!([]));
        assert_eq!(v["verdict"], "fail");
        assert_eq!(v["schema_version"], 1);
    }

    #[test]
    fn field_order_is_declaration_order() {
        let j = Report::new("geometry-selftest").to_json();
        let keys = ["\"schema\"", "\"version\"", "\"command\"", "\"elapsed_seconds\"", "\"verdict\"", "\"pmp\"", "\"geometry\""];
        let pos: Vec<usize> = keys.iter().map(|k| j.find(k).unwrap()).collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]), "{j}");
    }

    #[test]
    fn needle_section_verdicts() {
        let mk = |eps: f64, d1: f64, d2: f64| NeedleSample {
            eps,
            first_defect: d1,
            second_defect: d2,
            endpoint_defects: vec![],
            endpoint_quotients: vec![],
            changed_measure: 0.0,
            e_measure: 0.0,
            f_measure: 0.0,
            set_residuals: [0.0; 3],
        };
        let good: Vec<NeedleSample> = [0.1, 0.2, 0.05].iter().map(|e| mk(*e, e * e, e * e * e)).collect();
        let s = NeedleSection::evaluate(10, good, 1.9);
        assert_eq!(s.verdict, Verdict::Pass);
        assert_eq!(s.samples[0].eps, 0.2);
        let bad: Vec<NeedleSample> = [0.1, 0.2, 0.05].iter().map(|e| mk(*e, *e, e * e)).collect();
        assert_eq!(NeedleSection::evaluate(10, bad, 1.9).verdict, Verdict::Fail);
    }
}
