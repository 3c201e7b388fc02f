//! Numerical checks of equilibrium conditions and modelling assumptions:
//! first-order stationarity residuals, the strict-competitiveness affine fit,
//! PL and Lipschitz probes, and estimator-vs-oracle gradient checks.

mod gradcheck;
mod probes;
mod residual;
mod standin;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use gradcheck::{
    check_hessian, check_meta_gradient, check_pg, grad_check_suite, GradCheckEntry, GradCheckReport,
    CHECK_THETA,
};
pub use probes::{
    lipschitz_probe, pl_probe, sc_check, BlockGradients, LipschitzBlock, LipschitzReport,
    McAttackerObjective, McBlocks, Objective, PlProbe, PlReport, PlStatus, ScFit,
};
pub use residual::{
    fose_residual, fose_residual_with, McResidualOracle, ResidualConfig, ResidualEstimate, ResidualOracle,
};
pub use standin::{QuadraticStandIn, StandInAttacker, StandInBlocks};

/// One row of diagnostic output. Residuals are gradient norms and therefore
/// non-negative; `sc_fit.c` is signed.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub iteration: usize,
    pub defender_residual: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defender_residual_se: Option<f64>,
    #[serde(default)]
    pub attacker_residuals: BTreeMap<u32, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sc_fit: Option<ScFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pl_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_check_rel_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wallclock_s: Option<f64>,
}

impl DiagnosticRecord {
    pub fn attacker_residual_max(&self) -> Option<f64> {
        self.attacker_residuals.values().cloned().reduce(f64::max)
    }

    /// Two-column `field  value` table for terminal output.
    pub fn to_table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("iteration".into(), self.iteration.to_string()),
            (
                "defender_residual".into(),
                format!("{:.6e}", self.defender_residual),
            ),
        ];
        if let Some(se) = self.defender_residual_se {
            rows.push(("defender_residual_se".into(), format!("{se:.6e}")));
        }
        for (id, r) in &self.attacker_residuals {
            rows.push((format!("attacker_residual[{id}]"), format!("{r:.6e}")));
        }
        if let Some(fit) = &self.sc_fit {
            rows.push(("sc_fit.c".into(), format!("{:.6}", fit.c)));
            rows.push(("sc_fit.d".into(), format!("{:.6}", fit.d)));
            rows.push((
                "sc_fit.max_abs_residual".into(),
                format!("{:.3e}", fit.max_abs_residual),
            ));
        }
        if let Some(p) = self.pl_ratio {
            rows.push(("pl_ratio".into(), format!("{p:.6}")));
        }
        if let Some(e) = self.grad_check_rel_err {
            rows.push(("grad_check_rel_err".into(), format!("{e:.3e}")));
        }
        if let Some(w) = self.wallclock_s {
            rows.push(("wallclock_s".into(), format!("{w:.3}")));
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }
}
