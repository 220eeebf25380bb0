//! Deterministic text reports.

use std::fmt::Write as _;

use blowup_core::cohring::BlowupGeometry;
use blowup_core::reconstruct::{Budget, DecompositionResult, InitialData};
use blowup_core::series::key_string;

use crate::config::RunConfig;

pub fn initial_report(geom: &BlowupGeometry, initial: &InitialData, budget: &Budget) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "initial conditions for {}", geom.xt.name);
    let _ = writeln!(
        s,
        "codimension r = {}, conductor m = {}, bound = {}, margin = {}",
        geom.r, geom.field.m, budget.bound, budget.margin
    );
    let _ = writeln!(s, "windows: z in [{}, {}], q numerators in [-{}, {}] over {}",
        budget.z_min, budget.z_max, budget.q_window, budget.q_window, 2 * (geom.r as i64 - 1));
    let _ = writeln!(s, "\ntau0 (H*(X)-valued, q-exponents over {}):", 2 * (geom.r as i64 - 1));
    if initial.tau0.is_zero() {
        let _ = writeln!(s, "  0");
    }
    for (k, v) in &initial.tau0.terms {
        let _ = writeln!(s, "  {} * {}", key_string(k), class_string(&geom.x.basis_names, v));
    }
    for (j, s0) in initial.sigma0.iter().enumerate() {
        let _ = writeln!(s, "\nvarsigma0[{j}] = -(r-1) lambda_{j} + h_Z{j} + tail:");
        let _ = writeln!(
            s,
            "  lambda_{j} = {} * q^({}/{})",
            s0.constants.lambda_value.0,
            s0.constants.lambda_value.1,
            2 * (geom.r as i64 - 1)
        );
        let _ = writeln!(
            s,
            "  q_Z{j} = {} * q^({}/{})",
            s0.constants.q_fj.0,
            s0.constants.q_fj.1,
            2 * (geom.r as i64 - 1)
        );
        let h: Vec<String> = s0
            .h
            .coeffs
            .iter()
            .enumerate()
            .filter(|(_, c)| !num::Zero::is_zero(*c))
            .map(|(i, c)| format!("{c} * {}", geom.z.basis_names[i]))
            .collect();
        let _ = writeln!(
            s,
            "  h_Z{j} = 2 pi i * [{}]",
            if h.is_empty() { "0".to_string() } else { h.join(" + ") }
        );
        if s0.series.is_zero() {
            let _ = writeln!(s, "  tail = 0");
        } else {
            let _ = writeln!(s, "  tail:");
            for (k, v) in &s0.series.terms {
                let _ = writeln!(
                    s,
                    "    {} * {}",
                    key_string(k),
                    class_string(&geom.z.basis_names, v)
                );
            }
        }
    }
    let _ = writeln!(
        s,
        "\nPsi0: {} terms, z-degrees {}..{}",
        initial.psi0.terms.len(),
        initial.psi0.terms.keys().map(|k| k.z).min().unwrap_or(0),
        initial.psi0.terms.keys().map(|k| k.z).max().unwrap_or(0)
    );
    s
}

fn class_string(names: &[String], v: &blowup_core::series::CVec) -> String {
    let parts: Vec<String> = v
        .0
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.is_zero())
        .map(|(i, c)| format!("({c}) {}", names[i]))
        .collect();
    if parts.is_empty() {
        "0".to_string()
    } else {
        parts.join(" + ")
    }
}

pub fn reconstruction_report(
    geom: &BlowupGeometry,
    cfg: &RunConfig,
    result: &DecompositionResult,
) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "reconstruction of {}", geom.xt.name);
    let _ = writeln!(
        s,
        "bound -K.d <= {}, margin {}, {} invariants extracted",
        cfg.bound,
        cfg.order_margin,
        result.dataset.inv.len()
    );
    let _ = writeln!(s, "\nverification:");
    let _ = write!(s, "{}", result.report.to_text());
    let _ = writeln!(s, "\ninvariants (class; insertions; value):");
    for ((d, ins), v) in &result.dataset.inv {
        let names: Vec<&str> = ins
            .iter()
            .map(|&i| geom.xt.basis_names[i as usize].as_str())
            .collect();
        let _ = writeln!(s, "  d={:?} <{}> = {}", d.as_slice(), names.join(", "), v);
    }
    s
}
