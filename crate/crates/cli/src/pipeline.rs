//! vacuum → dress* → frame → synthesize → transforms → verify → outputs.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use isothermic_core::dressing::{dress, lie_transform, lie_transform_sheet, ribaucour_apply};
use isothermic_core::export::{write_csv, write_obj};
use isothermic_core::frames::{integrate_frame, FrameSheet, IntegrationOptions};
use isothermic_core::geometry::{classical_christoffel, synthesize_sequence, verify_combescure, verify_isothermic, CombescureSequence};
use isothermic_core::system::{pde_residual, ResidualField};
use isothermic_core::{vacuum, Report, SolutionSource};
use serde::Serialize;

use crate::config::{OutputKind, Step, Validated};
use crate::CliError;

/// A report with the budget it was held to, if any.
#[derive(Clone, Debug, Serialize)]
pub struct Checked {
    #[serde(flatten)]
    pub report: Report,
    pub budget: Option<f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct Outcome {
    pub passed: bool,
    pub failed: Vec<String>,
    pub reports: Vec<Checked>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }
}

struct Ledger {
    reports: Vec<Checked>,
}

impl Ledger {
    fn push(&mut self, report: Report, budget: Option<f64>) {
        let passed = budget.is_none_or(|b| report.max_residual <= b);
        self.reports.push(Checked { report, budget, passed });
    }

    fn field(&mut self, name: &str, grid: &isothermic_core::GridSpec, field: &ResidualField<f64>, keep: impl Fn(usize) -> bool, budget: Option<f64>) {
        self.push(Report::from_field(name, grid, field, keep), budget);
    }

    fn scalar(&mut self, name: &str, grid: &isothermic_core::GridSpec, value: f64, budget: Option<f64>) {
        self.push(Report::scalar(name, grid, value), budget);
    }

    fn finish(self) -> Outcome {
        let failed: Vec<String> = self.reports.iter().filter(|r| !r.passed).map(|r| r.report.name.clone()).collect();
        Outcome { passed: failed.is_empty(), failed, reports: self.reports }
    }
}

fn verify_sequence(ledger: &mut Ledger, prefix: &str, seq: &CombescureSequence<f64>, cfg: &Validated) -> Result<(), CliError> {
    let tol = &cfg.config.tolerances;
    let grid = &seq.sheets[0].grid;
    for (l, s) in seq.sheets.iter().enumerate() {
        let rep = verify_isothermic(s);
        let keep = |n: usize| !s.mask[n];
        let nullity = ResidualField { values: s.u.iter().map(|u| s.shape.form_k(u, u).abs()).collect() };
        ledger.field(&format!("{prefix}.sheet{l}.metric_nullity"), grid, &nullity, |_| true, Some(tol.algebraic));
        for (name, field) in rep.fields() {
            ledger.field(&format!("{prefix}.sheet{l}.{name}"), grid, field, keep, tol.geometry);
        }
        let masked = s.mask.iter().filter(|m| **m).count();
        ledger.scalar(&format!("{prefix}.sheet{l}.masked_nodes"), grid, masked as f64, None);
    }
    let comb = verify_combescure(seq).map_err(CliError::Numerical)?;
    let keep = |n: usize| !seq.sheets.iter().any(|s| s.mask[n]);
    ledger.field(&format!("{prefix}.combescure_parallelism"), grid, &comb.parallelism, keep, tol.geometry);
    // condition number of (u_1 .. u_n), so that smaller is better like every other entry
    ledger.scalar(&format!("{prefix}.combescure_condition"), grid, 1.0 / comb.rank_ratio, Some(1.0 / isothermic_core::geometry::RANK_THRESHOLD));
    Ok(())
}

fn write_output(path: &Path, body: impl FnOnce(&mut BufWriter<File>) -> Result<(), CliError>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    }
    let file = File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    body(&mut w)?;
    w.flush().map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Runs a validated pipeline. Output paths are relative to `base`.
pub fn run(cfg: &Validated, base: &Path) -> Result<Outcome, CliError> {
    let tol = &cfg.config.tolerances;
    let grid = &cfg.grid;
    let mut ledger = Ledger { reports: Vec::new() };

    let mut source: Arc<SolutionSource<f64>> = Arc::new(vacuum(cfg.shape));
    for element in &cfg.recipe {
        source = dress(source, element.clone()).map_err(CliError::Numerical)?.source;
    }
    let pde = pde_residual(&source, grid).map_err(CliError::Numerical)?;
    ledger.field("source.pde_residual", grid, &pde, |_| true, tol.geometry);

    let opts = IntegrationOptions { substep_bound: tol.substep_bound, drift_budget: tol.drift, y_tolerance: tol.y_cross_check, ..Default::default() };
    let mut sheet: FrameSheet<f64> = integrate_frame(source.clone(), grid, &cfg.lambdas(), &opts).map_err(CliError::Numerical)?;
    ledger.scalar("frame.drift", grid, sheet.max_form_residual().0, Some(tol.drift));
    let y_gap = ResidualField { values: sheet.y_discrepancy.clone().unwrap_or_default() };
    ledger.field("frame.y_cross_check", grid, &y_gap, |_| true, Some(tol.y_cross_check));

    let mut seq = synthesize_sequence(&sheet, &cfg.basis).map_err(CliError::Numerical)?;
    verify_sequence(&mut ledger, "initial", &seq, cfg)?;

    for (i, step) in cfg.steps.iter().enumerate() {
        match step {
            Step::Christoffel(to) => {
                let next = synthesize_sequence(&sheet, to).map_err(CliError::Numerical)?;
                if cfg.shape.n == 2 && cfg.shape.k == 1 {
                    let cl = classical_christoffel(&seq.sheets[0], &next.sheets[0]);
                    let g = &seq.sheets[0].grid;
                    let keep = |n: usize| !seq.sheets[0].mask[n] && !next.sheets[0].mask[n];
                    ledger.field(&format!("step{i}.christoffel.parallelism"), g, &cl.parallelism, keep, tol.geometry);
                    let positive = cl.orientation.iter().enumerate().filter(|(n, d)| keep(*n) && **d >= 0.0).count();
                    ledger.scalar(&format!("step{i}.christoffel.positive_orientation_nodes"), g, positive as f64, None);
                }
                seq = next;
                verify_sequence(&mut ledger, &format!("step{i}"), &seq, cfg)?;
            }
            Step::Ribaucour(element) => {
                let r = ribaucour_apply(&seq, &sheet, element).map_err(CliError::Numerical)?;
                let g = sheet.grid.clone();
                let degenerate = r.frame.degenerate();
                let keep = |n: usize| !degenerate[n] && !r.seq.sheets.iter().any(|s| s.mask[n]);
                ledger.scalar(&format!("step{i}.ribaucour.formula"), &g, r.formula_residual, Some(tol.algebraic));
                ledger.field(&format!("step{i}.ribaucour.equidistance"), &g, &r.equidistance, keep, Some(tol.algebraic));
                if cfg.shape.has_gamma() {
                    ledger.scalar(&format!("step{i}.ribaucour.sphere_radius"), &g, r.sphere_radius, Some(tol.algebraic));
                    if let Some(a) = &r.sphere_alignment {
                        ledger.field(&format!("step{i}.ribaucour.sphere_alignment"), &g, a, keep, tol.geometry);
                    }
                }
                ledger.scalar(&format!("step{i}.ribaucour.degenerate_nodes"), &g, degenerate.iter().filter(|d| **d).count() as f64, None);
                sheet = r.frame.sheet;
                seq = r.seq;
                verify_sequence(&mut ledger, &format!("step{i}"), &seq, cfg)?;
            }
            Step::Lie(r) => {
                seq = lie_transform(&seq, *r).map_err(CliError::Numerical)?;
                sheet = lie_transform_sheet(&sheet, *r).map_err(CliError::Numerical)?;
                verify_sequence(&mut ledger, &format!("step{i}"), &seq, cfg)?;
            }
        }
    }

    let outcome = ledger.finish();
    for o in &cfg.config.outputs {
        let path: PathBuf = base.join(&o.path);
        let s = &seq.sheets[o.sheet];
        match o.kind {
            OutputKind::Obj => write_output(&path, |w| write_obj(s, w).map_err(CliError::Numerical))?,
            OutputKind::Csv => write_output(&path, |w| write_csv(s, w).map_err(CliError::Numerical))?,
            OutputKind::Report => write_output(&path, |w| {
                w.write_all(outcome.to_json().as_bytes()).and_then(|_| w.write_all(b"\n")).map_err(|e| CliError::Io(e.to_string()))
            })?,
        }
    }
    Ok(outcome)
}
