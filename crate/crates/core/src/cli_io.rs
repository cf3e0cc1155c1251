//! Run configuration, dispatch and report emission.

use crate::check::CheckReport;
use crate::decomposition::{
    certify_exactness, decompose, project_atoms, relabel_levels, verify_theorem_invariants, DecompositionReport,
};
use crate::error::{Error, Result};
use crate::fiber_extension::{
    build_product, check_measure_preservation, check_projection_identity, ActionMode, FiberAction, FiberSet,
    ProductSystem,
};
use crate::k_quotient::{
    check_filtration_inclusions, decompose_k, present_projection, Dynamics, KeyedAction,
    TwoSidedSymbolicSystem,
};
use crate::lorentz_gas::{run_ensemble, trajectories_csv, EnsembleParams, LorentzConfig};
use crate::rational::{q, stationary, Rational, Q};
use crate::symbolic_base::{cell_name, validate_base, SymbolicBaseSystem};
use num_traits::One;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub const TOOL: &str = "tailatlas";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "decompose")]
    Decompose,
    #[serde(rename = "k-decompose")]
    KDecompose,
    #[serde(rename = "lorentz")]
    Lorentz,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Decompose => "decompose",
            Mode::KDecompose => "k-decompose",
            Mode::Lorentz => "lorentz",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<String>>,
    pub transition: Vec<Vec<Rational>>,
    /// Defaults to the stationary probability vector when it is unique,
    /// uniform otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell_measure: Option<Vec<Rational>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure_preserving: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum FiberBlock {
    Finite {
        size: usize,
        #[serde(default = "default_mode")]
        mode: ActionMode,
        maps: Vec<Vec<usize>>,
    },
    Lattice {
        dim: usize,
        psi: Vec<Vec<i64>>,
    },
}

fn default_mode() -> ActionMode {
    ActionMode::Bijective
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KBlock {
    pub depth: usize,
    #[serde(default)]
    pub key_coordinate: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filtration_depth: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LorentzBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<LorentzConfig>,
    pub trajectories: usize,
    pub collisions: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericBlock {
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_max_power")]
    pub max_power: usize,
    /// Lattice window `L`: fiber points with `|i|_inf <= L`.
    #[serde(default = "default_window")]
    pub window: i64,
    #[serde(default = "default_trials")]
    pub projection_trials: usize,
    #[serde(default = "default_projection_depth")]
    pub projection_depth: usize,
}

fn default_tolerance() -> f64 {
    1e-9
}
fn default_max_power() -> usize {
    10_000
}
fn default_window() -> i64 {
    8
}
fn default_trials() -> usize {
    200
}
fn default_projection_depth() -> usize {
    4
}

impl Default for NumericBlock {
    fn default() -> Self {
        NumericBlock {
            tolerance: default_tolerance(),
            max_power: default_max_power(),
            window: default_window(),
            projection_trials: default_trials(),
            projection_depth: default_projection_depth(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestHooks {
    /// Moves a state between atoms before verification.
    #[serde(default)]
    pub corrupt_atom: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base: Option<BaseBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fiber: Option<FiberBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<KBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lorentz: Option<LorentzBlock>,
    #[serde(default)]
    pub numeric: NumericBlock,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_hooks: Option<TestHooks>,
}

fn json_path(path: &serde_path_to_error::Path) -> String {
    match path.to_string() {
        p if p == "." => p,
        p => format!(".{p}"),
    }
}

/// Parses and validates a config; violations carry JSON paths.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = json_path(e.path());
        Error::Config(vec![format!("{path}: {}", e.inner())])
    })?;
    validate_config(&cfg)?;
    Ok(cfg)
}

fn validate_config(cfg: &RunConfig) -> Result<()> {
    let mut bad = Vec::new();
    let present = |b: bool, name: &str, v: &mut Vec<String>| {
        if b {
            v.push(format!("ambiguous mode: block .{name} present in mode {}", cfg.mode.name()));
        }
    };
    match cfg.mode {
        Mode::Decompose => {
            present(cfg.k.is_some(), "k", &mut bad);
            present(cfg.lorentz.is_some(), "lorentz", &mut bad);
            if cfg.base.is_none() || cfg.fiber.is_none() {
                bad.push("mode decompose needs .base and .fiber".into());
            }
        }
        Mode::KDecompose => {
            present(cfg.lorentz.is_some(), "lorentz", &mut bad);
            if cfg.base.is_none() || cfg.fiber.is_none() || cfg.k.is_none() {
                bad.push("mode k-decompose needs .base, .fiber and .k".into());
            }
        }
        Mode::Lorentz => {
            present(cfg.base.is_some(), "base", &mut bad);
            present(cfg.fiber.is_some(), "fiber", &mut bad);
            present(cfg.k.is_some(), "k", &mut bad);
            match &cfg.lorentz {
                None => bad.push("mode lorentz needs .lorentz".into()),
                Some(l) if l.preset.is_some() == l.table.is_some() => {
                    bad.push(".lorentz: give exactly one of preset and table".into())
                }
                _ => {}
            }
        }
    }
    if !bad.is_empty() {
        return Err(Error::Config(bad));
    }
    if let Some(b) = &cfg.base {
        build_base(b)?;
    }
    Ok(())
}

fn prefixed(e: Error, prefix: &str) -> Error {
    match e {
        Error::InvalidBase(v) | Error::InvalidAction(v) | Error::InvalidLorentz(v) => {
            Error::Config(v.into_iter().map(|m| format!("{prefix}{m}")).collect())
        }
        other => other,
    }
}

pub fn build_base(b: &BaseBlock) -> Result<SymbolicBaseSystem> {
    let n = b.transition.len();
    let transition: Vec<Vec<Q>> = b.transition.iter().map(|r| r.iter().map(|x| x.0.clone()).collect()).collect();
    let cells = b.cells.clone().unwrap_or_else(|| (0..n).map(cell_name).collect());
    let measure = match &b.cell_measure {
        Some(m) => m.iter().map(|x| x.0.clone()).collect(),
        None => {
            let square = transition.iter().all(|r| r.len() == n);
            let stat = if square { stationary(&transition, &Q::one()) } else { None };
            stat.filter(|v| v.iter().all(crate::rational::is_positive))
                .unwrap_or_else(|| vec![q(1, n.max(1) as i64); n])
        }
    };
    let base = SymbolicBaseSystem::new(cells, transition, measure, b.measure_preserving).map_err(|e| prefixed(e, ".base."))?;
    validate_base(&base).map_err(|e| prefixed(e, ".base."))?;
    Ok(base)
}

fn fiber_parts(f: &FiberBlock, window: i64) -> (FiberSet, FiberAction) {
    match f {
        FiberBlock::Finite { size, mode, maps } => {
            (FiberSet::Finite { size: *size }, FiberAction::Maps { mode: *mode, maps: maps.clone() })
        }
        FiberBlock::Lattice { dim, psi } => {
            (FiberSet::Lattice { dim: *dim, window }, FiberAction::Displacements { psi: psi.clone() })
        }
    }
}

/// Canonical JSON of a config: sorted keys, defaults filled in.
pub fn canonical_json(cfg: &RunConfig) -> String {
    let v: Value = serde_json::to_value(cfg).expect("config serializes");
    serde_json::to_string(&v).expect("value serializes")
}

pub fn config_digest(cfg: &RunConfig) -> String {
    hex::encode(Sha256::digest(canonical_json(cfg).as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Header {
    pub tool: String,
    pub version: String,
    pub schema_version: u32,
    pub config_digest: String,
    pub mode: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub header: Header,
    pub passed: bool,
    pub body: Value,
    pub checks: Vec<CheckReport>,
    pub warnings: Vec<String>,
}

impl Report {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            2
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: Report,
    pub csv: Option<String>,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("serializable")
}

fn corrupt(report: &mut DecompositionReport) {
    let atoms: Vec<(usize, usize)> = report
        .components
        .iter()
        .enumerate()
        .flat_map(|(ci, c)| (0..c.atoms.len()).map(move |ai| (ci, ai)))
        .collect();
    if atoms.len() >= 2 {
        let (c1, a1) = atoms[1];
        let moved = report.components[c1].atoms[a1].index.remove(0);
        report.components[atoms[0].0].atoms[atoms[0].1].index.push(moved);
    } else if let Some(&(c, a)) = atoms.first() {
        report.components[c].atoms[a].index.pop();
    }
}

fn decomposition_checks(
    cfg: &RunConfig,
    ps: &ProductSystem,
    report: &mut DecompositionReport,
    checks: &mut Vec<CheckReport>,
    warnings: &mut Vec<String>,
) {
    let num = &cfg.numeric;
    checks.push(check_projection_identity(ps, num.projection_trials, num.projection_depth, cfg.seed));
    match check_measure_preservation(ps) {
        Ok(c) => checks.push(c),
        Err(e) => warnings.push(format!("measure preservation not checked: {e}")),
    }
    if cfg.test_hooks.as_ref().is_some_and(|h| h.corrupt_atom) {
        corrupt(report);
        warnings.push("test hook: atom corrupted before verification".into());
    }
    checks.push(verify_theorem_invariants(report, ps));
    checks.push(project_atoms(report));
    if !ps.fiber.is_lattice() {
        let mut cert = CheckReport::new("certify_exactness");
        match certify_exactness(report, ps, num.tolerance, num.max_power) {
            Ok(()) => {
                for c in report.components.iter().flat_map(|c| &c.certificates) {
                    cert.pass(
                        format!("atom[{}.{}]", c.component, c.atom),
                        format!("n = {}, norm = {:e}", c.n, c.norm),
                    );
                }
            }
            Err(e) => cert.fail("certificate", e.to_string()),
        }
        checks.push(cert);
        match relabel_levels(report, ps) {
            Ok(r) => checks.push(r.verification),
            Err(e) => warnings.push(format!("relabeling skipped: {e}")),
        }
    }
}

fn run_decompose(cfg: &RunConfig) -> Result<(Value, Vec<CheckReport>, Vec<String>)> {
    let base = build_base(cfg.base.as_ref().expect("validated"))?;
    let (fiber, action) = fiber_parts(cfg.fiber.as_ref().expect("validated"), cfg.numeric.window);
    let ps = build_product(&base, &fiber, &action).map_err(|e| prefixed(e, ".fiber."))?;
    let mut report = decompose(&ps)?;
    let mut checks = vec![validate_base(&base)?.report];
    let mut warnings = Vec::new();
    decomposition_checks(cfg, &ps, &mut report, &mut checks, &mut warnings);
    let body = serde_json::json!({
        "product": {
            "states": ps.len(),
            "edges": ps.edge_count(),
            "boundary_edges": ps.boundary_edge_count(),
        },
        "decomposition": to_value(&report),
    });
    Ok((body, checks, warnings))
}

fn run_k(cfg: &RunConfig) -> Result<(Value, Vec<CheckReport>, Vec<String>)> {
    let base = build_base(cfg.base.as_ref().expect("validated"))?;
    let k = cfg.k.as_ref().expect("validated");
    let (_, action) = fiber_parts(cfg.fiber.as_ref().expect("validated"), cfg.numeric.window);
    let keyed = KeyedAction { action, coordinate: k.key_coordinate };
    let ts = TwoSidedSymbolicSystem::new(base.clone(), k.depth)?;
    let (mut report, quotient) = decompose_k(&ts, &keyed)?;
    let mut checks = vec![quotient.checks.clone()];
    let mut warnings = Vec::new();
    let fdepth = k.filtration_depth.unwrap_or(k.depth.min(3));
    checks.push(check_filtration_inclusions(&ts, &keyed, fdepth, Dynamics::Shift)?);
    let mut indep = CheckReport::new("depth_independence");
    let next = TwoSidedSymbolicSystem::new(base, k.depth + 1)?;
    let (r2, q2) = decompose_k(&next, &keyed)?;
    indep.record(
        "depth_k_vs_k_plus_1",
        present_projection(&report, &quotient) == present_projection(&r2, &q2),
        format!("atoms projected to (x_0, fiber) agree at depths {} and {}", k.depth, k.depth + 1),
    );
    checks.push(indep);
    if cfg.test_hooks.as_ref().is_some_and(|h| h.corrupt_atom) {
        corrupt(&mut report);
        warnings.push("test hook: atom corrupted before verification".into());
    }
    checks.push(verify_theorem_invariants(&report, &quotient.quotient));
    let body = serde_json::json!({
        "quotient": to_value(&quotient.summary(k.key_coordinate)),
        "decomposition": to_value(&report),
    });
    Ok((body, checks, warnings))
}

fn run_lorentz(cfg: &RunConfig) -> Result<(Value, Vec<CheckReport>, Vec<String>, Option<String>)> {
    let block = cfg.lorentz.as_ref().expect("validated");
    let table = match (&block.preset, &block.table) {
        (Some(name), None) => LorentzConfig::preset(name).map_err(|e| prefixed(e, ".lorentz.preset: "))?,
        (None, Some(t)) => t.clone(),
        _ => unreachable!("validated"),
    };
    table.validate().map_err(|e| prefixed(e, ".lorentz.table: "))?;
    let params = EnsembleParams {
        trajectories: block.trajectories,
        collisions: block.collisions,
        seed: cfg.seed,
        checkpoints: block.checkpoints.clone(),
        threads: block.threads,
    };
    let (stats, runs) = run_ensemble(&table, &params)?;
    let mut check = CheckReport::new("lorentz_ensemble");
    check.record(
        "energy",
        stats.max_speed_deviation < 1e-12,
        format!("max | |v| - 1 | = {:e}", stats.max_speed_deviation),
    );
    check.record(
        "return_fraction_monotone",
        stats.return_fraction.windows(2).all(|w| w[0] <= w[1]),
        "return fraction nondecreasing over checkpoints",
    );
    let psd = stats.covariance.iter().all(|c| {
        let diag = c.iter().enumerate().all(|(i, r)| r[i] >= 0.0);
        let det = if c.len() == 2 { c[0][0] * c[1][1] - c[0][1] * c[1][0] } else { 0.0 };
        diag && det >= -1e-9 * (1.0 + c[0][0].abs())
    });
    check.record("covariance_psd", psd, "covariance matrices positive semidefinite");
    check.record("completed", stats.abandoned == 0, format!("{} of {} trajectories completed", stats.completed, stats.trajectories));
    let mut warnings = stats.warnings.clone();
    for (k, (m, se)) in stats.drift_mean.iter().zip(&stats.drift_se).enumerate() {
        if (m.abs()) > 3.0 * se {
            warnings.push(format!("drift component {k} = {m:e} exceeds 3 standard errors ({se:e})"));
        }
    }
    let csv = match cfg.output.as_ref().and_then(|o| o.csv.as_ref()) {
        Some(_) => Some(trajectories_csv(&stats, &runs)?),
        None => None,
    };
    let body = serde_json::json!({ "table": to_value(&table), "stats": to_value(&stats) });
    Ok((body, vec![check], warnings, csv))
}

const SURROGATE_NOTE: &str = "K-mixing of the Sinai base and ergodicity of first-return maps are imported from the literature; \
the ensemble statistics are empirical surrogates for conservativity, drift and recurrence only";

/// Runs the pipeline for the config mode.
pub fn run(cfg: &RunConfig) -> Result<RunOutput> {
    let (body, checks, warnings, csv, note) = match cfg.mode {
        Mode::Decompose => {
            let (b, c, w) = run_decompose(cfg)?;
            (b, c, w, None, None)
        }
        Mode::KDecompose => {
            let (b, c, w) = run_k(cfg)?;
            (b, c, w, None, None)
        }
        Mode::Lorentz => {
            let (b, c, w, csv) = run_lorentz(cfg)?;
            (b, c, w, csv, Some(SURROGATE_NOTE.to_string()))
        }
    };
    let passed = checks.iter().all(|c| c.passed);
    let report = Report {
        header: Header {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            schema_version: SCHEMA_VERSION,
            config_digest: config_digest(cfg),
            mode: cfg.mode.name().into(),
            note,
        },
        passed,
        body,
        checks,
        warnings,
    };
    Ok(RunOutput { report, csv })
}

/// Parses, runs and writes outputs; returns the process exit code
/// (0 all checks pass, 2 some check failed, 1 input or engine error).
pub fn run_text(text: &str, mode: Option<Mode>, seed: Option<u64>, out: Option<&str>) -> (i32, String) {
    let result = (|| -> Result<RunOutput> {
        let mut cfg = parse_config(text)?;
        if let Some(m) = mode {
            if m != cfg.mode {
                return Err(Error::Config(vec![format!(
                    "command {} does not match config mode {}",
                    m.name(),
                    cfg.mode.name()
                )]));
            }
        }
        if let Some(s) = seed {
            cfg.seed = s;
        }
        let output = run(&cfg)?;
        let json = output.report.to_json();
        let report_path = out.map(str::to_string).or_else(|| cfg.output.as_ref().and_then(|o| o.report.clone()));
        if let Some(p) = report_path {
            std::fs::write(&p, &json).map_err(|e| Error::Io(format!("{p}: {e}")))?;
        }
        if let (Some(csv), Some(p)) = (&output.csv, cfg.output.as_ref().and_then(|o| o.csv.as_ref())) {
            std::fs::write(p, csv).map_err(|e| Error::Io(format!("{p}: {e}")))?;
        }
        Ok(output)
    })();
    match result {
        Ok(o) => (o.report.exit_code(), o.report.to_json()),
        Err(e) => (1, format!("error: {e}\n")),
    }
}
