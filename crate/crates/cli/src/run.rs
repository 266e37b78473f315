//! The `simulate`, `verify` and `converge` subcommands.
//!
//! Every run writes a JSON report (metadata, check rows, timing) plus a data
//! table in the chosen format. File names carry the config hash and the seed,
//! so artifacts of different configs never collide. Writes go through a
//! temporary file in the target directory followed by a rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use levysee::convergence::{convergence_report, ConvergenceReport, ReportOptions, SequenceScenario};
use levysee::ensemble::{variance_and_stderr, Ensemble};
use levysee::levy::empirical_char;
use levysee::ou_solver::{
    flow_apply, flow_composition_residual, fubini_residual, markov_diagnostic, mild_solution, ou_cadlag,
    square_moment_report, weak_solution_residuals, Replica,
};
use levysee::stochint::{levy_integral, weak_levy_integral};
use levysee::{DualVector, LevyPath, Quadrature, SeeProblem, SolutionPath, TestFunction};

use crate::config::{OutputFormat, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Simulate,
    Verify,
    Converge,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::Verify => "verify",
            Command::Converge => "converge",
        }
    }
}

/// Command-line overrides of config values.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub format: Option<OutputFormat>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Pass,
    Fail,
    Skipped,
}

/// One verified invariant. `id` is stable across releases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckRow {
    pub id: &'static str,
    pub invariant: &'static str,
    pub status: Status,
    pub value: Option<f64>,
    pub tolerance: String,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: Command,
    pub config_hash: String,
    pub seed: u64,
    /// Sequence index of the simulated problem; `null` is the limit.
    pub index: Option<usize>,
    pub threads: usize,
    pub elapsed_seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
struct Report<'a, T: Serialize> {
    metadata: Metadata,
    passed: bool,
    checks: &'a [CheckRow],
    results: T,
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub checks: Vec<CheckRow>,
    pub report: PathBuf,
    pub data: PathBuf,
}

impl Outcome {
    /// 0 iff every check passed or was skipped.
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

pub fn run(cfg: &RunConfig, command: Command, opts: &RunOptions) -> Result<Outcome> {
    let start = Instant::now();
    let seed = opts.seed.unwrap_or(cfg.experiment.seed);
    let dir = opts.out.clone().unwrap_or_else(|| cfg.output.dir.clone());
    let format = opts.format.unwrap_or(cfg.output.format);
    let stem = format!("{}-{}-s{seed}", command.name(), &cfg.hash[..12]);
    let index = match command {
        Command::Converge => None,
        _ => cfg.experiment.index,
    };
    let (checks, data, results) = match command {
        Command::Simulate => simulate(cfg, seed, format)?,
        Command::Verify => verify(cfg, seed, format)?,
        Command::Converge => converge(cfg, seed, format)?,
    };
    let data_path = write_atomic(&dir, &format!("{stem}.{}", format.extension()), &data)?;
    let passed = checks.iter().all(|c| c.status != Status::Fail);
    let report = Report {
        metadata: Metadata {
            tool: "levysee",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_hash: cfg.hash.clone(),
            seed,
            index,
            threads: rayon::current_num_threads(),
            elapsed_seconds: start.elapsed().as_secs_f64(),
        },
        passed,
        checks: &checks,
        results,
    };
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    let report_path = write_atomic(&dir, &format!("{stem}.report.json"), &json)?;
    Ok(Outcome { passed, checks, report: report_path, data: data_path })
}

fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    let path = dir.join(name);
    tmp.persist(&path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(path)
}

/// 17 significant digits.
fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

fn csv_bytes(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

type Artifacts = (Vec<CheckRow>, Vec<u8>, serde_json::Value);

#[derive(Serialize)]
struct TrajectoryJson {
    replica: usize,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

fn simulate(cfg: &RunConfig, seed: u64, format: OutputFormat) -> Result<Artifacts> {
    let problem = cfg.problem(cfg.experiment.index)?;
    let ens = Ensemble::new(cfg.experiment.replicas, seed);
    let sols: Vec<SolutionPath> = ens
        .map(|r| problem.replica(&ens, r).and_then(|rep| mild_solution(&problem, &rep)))
        .into_iter()
        .collect::<levysee::Result<_>>()?;
    let nodes: usize = sols.iter().map(SolutionPath::len).sum();
    let data = match format {
        OutputFormat::Csv => {
            let rows = sols.iter().enumerate().flat_map(|(r, sol)| {
                sol.times.iter().zip(&sol.values).flat_map(move |(t, v)| {
                    v.iter().enumerate().map(move |(k, x)| vec![r.to_string(), fmt_f64(*t), k.to_string(), fmt_f64(*x)])
                })
            });
            csv_bytes(&["replica", "t", "k", "value"], rows)?
        }
        OutputFormat::Json => {
            let out: Vec<TrajectoryJson> = sols
                .iter()
                .enumerate()
                .map(|(replica, s)| TrajectoryJson {
                    replica,
                    times: s.times.clone(),
                    values: s.values.iter().map(|v| v.as_slice().to_vec()).collect(),
                })
                .collect();
            json_bytes(&out)?
        }
    };
    let results = serde_json::json!({
        "replicas": sols.len(),
        "nodes": nodes,
        "rows": nodes * cfg.dim(),
        "evolution": problem.system().variant_name(),
    });
    Ok((Vec::new(), data, results))
}

fn converge(cfg: &RunConfig, seed: u64, format: OutputFormat) -> Result<Artifacts> {
    let shared = Arc::new(cfg.clone());
    let family = cfg.family()?;
    let scenario = SequenceScenario::new(
        move |n| shared.problem((n > 0).then_some(n)),
        family.clone(),
        family,
        cfg.experiment.probes.clone(),
        cfg.experiment.times.clone(),
        cfg.converge.indices.clone(),
    )?;
    let steps = cfg.converge.st_steps;
    let h = cfg.horizon() / steps as f64;
    let st_grid = (0..=steps).flat_map(|i| (i..=steps).map(move |j| (i as f64 * h, j as f64 * h))).collect();
    let options = ReportOptions {
        st_grid,
        level: cfg.experiment.level,
        q: cfg.converge.q,
        skorokhod_replicas: cfg.converge.skorokhod_replicas,
    };
    let report = convergence_report(&scenario, &Ensemble::new(cfg.converge.replicas, seed), &options)?;
    let checks = convergence_checks(cfg, &report);
    let data = match format {
        OutputFormat::Csv => csv_bytes(
            &[
                "n",
                "generator_sup",
                "propagator_sup",
                "fdd_distance",
                "fdd_se",
                "m_bound",
                "hs_sup",
                "nu_integral",
                "dominated",
                "skorokhod_mean",
            ],
            report.indices.iter().enumerate().map(|(i, &n)| {
                let col_max = |rows: &[Vec<f64>]| rows.iter().map(|r| r[i]).fold(0.0, f64::max);
                let sk: Vec<f64> = report.skorokhod.iter().filter(|r| r.n == n).map(|r| r.distance).collect();
                let ch = &report.characteristics[i];
                vec![
                    n.to_string(),
                    fmt_f64(col_max(&report.generator_sup)),
                    fmt_f64(col_max(&report.propagator_sup)),
                    fmt_f64(report.fdd[i].distance),
                    fmt_f64(report.fdd[i].se),
                    fmt_f64(ch.m_bound),
                    fmt_f64(ch.hs_sup),
                    fmt_f64(ch.nu_integral),
                    ch.dominated().to_string(),
                    fmt_f64(if sk.is_empty() { f64::NAN } else { sk.iter().sum::<f64>() / sk.len() as f64 }),
                ]
            }),
        )?,
        OutputFormat::Json => json_bytes(&report)?,
    };
    Ok((checks, data, serde_json::to_value(&report)?))
}

fn convergence_checks(cfg: &RunConfig, report: &ConvergenceReport) -> Vec<CheckRow> {
    let v = &cfg.verify;
    let ix = &report.indices;
    let mut rows = Vec::new();

    let invariant = "generator sup-norm decays like 1/n";
    let mut ratios = Vec::new();
    let mut all_zero = true;
    for g in &report.generator_sup {
        all_zero &= g.iter().all(|&x| x <= v.exact_tol);
        for i in 1..ix.len() {
            if g[i - 1] > v.exact_tol {
                ratios.push((g[i - 1] / g[i]) / (ix[i] as f64 / ix[i - 1] as f64));
            }
        }
    }
    rows.push(if all_zero {
        skipped("converge.generator_rate", invariant, "generator does not depend on n")
    } else if ix.len() < 2 {
        skipped("converge.generator_rate", invariant, "needs at least two indices")
    } else {
        ratio_row("converge.generator_rate", invariant, &ratios, 1.0, v.ratio_window)
    });

    let fdd = &report.fdd;
    let worst = fdd
        .windows(2)
        .map(|w| (w[1].distance - w[0].distance) / w[0].se.hypot(w[1].se))
        .fold(f64::NEG_INFINITY, f64::max);
    rows.push(CheckRow {
        id: "converge.fdd_trend",
        invariant: "f.d.d. distance to the limit is nonincreasing in n up to Monte Carlo error",
        status: if fdd.len() < 2 || worst <= v.sigma { Status::Pass } else { Status::Fail },
        value: worst.is_finite().then_some(worst),
        tolerance: format!("increase ≤ {}·SE", v.sigma),
        detail: fdd.iter().map(|r| format!("n={}: {:.4}±{:.4}", r.n, r.distance, r.se)).collect::<Vec<_>>().join(", "),
    });

    let b = &report.characteristics_bounds;
    let finite = b.m_bound.is_finite() && b.hs_sup.is_finite() && b.nu_integral.is_finite();
    rows.push(CheckRow {
        id: "converge.characteristics_bounded",
        invariant: "drift, Wiener and jump conditions hold uniformly in n at level q",
        status: if b.dominated && finite { Status::Pass } else { Status::Fail },
        value: Some(b.m_bound.max(b.hs_sup).max(b.nu_integral)),
        tolerance: "finite and dominated at every index".into(),
        detail: format!(
            "sup q′(m_n) = {:.6}, sup HS = {:.6}, sup ∫(q′²∧1)dν_n = {:.6}, dominated: {}",
            b.m_bound, b.hs_sup, b.nu_integral, b.dominated
        ),
    });
    rows
}

fn skipped(id: &'static str, invariant: &'static str, reason: impl Into<String>) -> CheckRow {
    CheckRow { id, invariant, status: Status::Skipped, value: None, tolerance: String::new(), detail: reason.into() }
}

fn bounded(id: &'static str, invariant: &'static str, value: f64, tol: f64, detail: impl Into<String>) -> CheckRow {
    CheckRow {
        id,
        invariant,
        status: if value <= tol { Status::Pass } else { Status::Fail },
        value: Some(value),
        tolerance: format!("≤ {tol:.1e}"),
        detail: detail.into(),
    }
}

/// Every ratio must fall within `target·(1 ± window)`.
fn ratio_row(id: &'static str, invariant: &'static str, ratios: &[f64], target: f64, window: f64) -> CheckRow {
    let (lo, hi) = (target * (1.0 - window), target * (1.0 + window));
    let ok = !ratios.is_empty() && ratios.iter().all(|r| (lo..=hi).contains(r));
    let worst = ratios.iter().cloned().max_by(|a, b| (a - target).abs().total_cmp(&(b - target).abs()));
    CheckRow {
        id,
        invariant,
        status: if ok { Status::Pass } else { Status::Fail },
        value: worst,
        tolerance: format!("ratio in [{lo:.3}, {hi:.3}]"),
        detail: format!("ratios {}", ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>().join(", ")),
    }
}

/// At most one case in twenty may exceed `sigma` standard errors.
fn mc_row(id: &'static str, invariant: &'static str, z: &[f64], sigma: f64) -> CheckRow {
    let misses = z.iter().filter(|&&x| !(x <= sigma)).count();
    let allowed = z.len() / 20;
    let worst = z.iter().cloned().fold(0.0, f64::max);
    CheckRow {
        id,
        invariant,
        status: if misses <= allowed { Status::Pass } else { Status::Fail },
        value: Some(worst),
        tolerance: format!("≤ {sigma}·SE in all but {allowed} of {} cases", z.len()),
        detail: format!("{} of {} cases within {sigma}·SE, worst {worst:.3} SE", z.len() - misses, z.len()),
    }
}

/// `diff` in standard errors; a degenerate (zero-variance) estimate must match
/// to `tol`.
fn zscore(diff: f64, se: f64, tol: f64) -> f64 {
    if se > 0.0 {
        diff / se
    } else if diff <= tol {
        0.0
    } else {
        f64::INFINITY
    }
}

/// Ratio of successive refinement levels of a per-level sum.
fn successive_ratios(levels: &[f64]) -> Vec<f64> {
    levels.windows(2).map(|w| w[0] / w[1]).collect()
}

fn max_of(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, f64::max)
}

struct Verifier<'a> {
    cfg: &'a RunConfig,
    problem: SeeProblem,
    ensemble: Ensemble,
    /// Replicas for pathwise and refinement checks.
    paths: Vec<Replica>,
}

fn verify(cfg: &RunConfig, seed: u64, format: OutputFormat) -> Result<Artifacts> {
    let problem = cfg.problem(cfg.experiment.index)?;
    let ensemble = Ensemble::new(cfg.verify.replicas, seed);
    let paths = (0..cfg.verify.refinement_replicas)
        .map(|r| problem.simulate(ensemble.replica_seed("pathwise", r)))
        .collect::<levysee::Result<_>>()?;
    let v = Verifier { cfg, problem, ensemble, paths };
    type Check<'b> = (&'static str, &'static str, fn(&Verifier<'b>) -> levysee::Result<CheckRow>);
    let checks: [Check; 16] = [
        ("evolution.identity", "U(t,t) = I", Verifier::evolution_identity),
        ("evolution.cocycle", "U(s,r)U(r,t) = U(s,t)", Verifier::evolution_cocycle),
        ("evolution.transpose_duality", "⟨U(s,t)′f, ψ⟩ = ⟨f, U(s,t)ψ⟩", Verifier::transpose_duality),
        ("evolution.forward_order", "forward equation residual shrinks at Simpson order", |v| v.equation_order(true)),
        ("evolution.backward_order", "backward equation residual shrinks at Simpson order", |v| v.equation_order(false)),
        ("stochint.weak_strong", "⟨∫R dL, ψ⟩ = ∫R′ψ dL", Verifier::weak_strong),
        ("levy.ito_sum", "Lévy–Itô components sum to the path", Verifier::ito_sum),
        ("levy.char_functional", "empirical characteristic functional matches Lévy–Khintchine", Verifier::char_functional),
        ("ou.weak_solution", "mild solution satisfies the weak equation", Verifier::weak_solution),
        ("ou.fubini", "stochastic Fubini identity for the convolution", Verifier::fubini),
        ("ou.mild_vs_cadlag", "mild and càdlàg representations agree", Verifier::mild_vs_cadlag),
        ("ou.cadlag_jumps", "ΔZ = B′ΔL at every jump", Verifier::cadlag_jumps),
        ("ou.flow_composition", "Γ(s,t) = Γ(r,t)∘Γ(s,r)", Verifier::flow_composition),
        ("ou.markov", "future increment independent of the present state", Verifier::markov),
        ("ou.covariance_oracle", "Var⟨X_t,ψ⟩ matches the closed-form covariance", Verifier::covariance_oracle),
        ("ou.square_moment", "E∫p′(X_s)² ds is nonincreasing in the level", Verifier::square_moment),
    ];
    let rows: Vec<CheckRow> = checks
        .iter()
        .map(|&(id, invariant, f)| match f(&v) {
            Ok(mut row) => {
                row.id = id;
                row.invariant = invariant;
                row
            }
            Err(levysee::Error::Mode(msg)) => skipped(id, invariant, msg),
            Err(e) => CheckRow {
                id,
                invariant,
                status: Status::Fail,
                value: None,
                tolerance: String::new(),
                detail: format!("error: {e}"),
            },
        })
        .collect();
    let data = match format {
        OutputFormat::Csv => csv_bytes(
            &["id", "status", "value", "tolerance", "detail"],
            rows.iter().map(|r| {
                vec![
                    r.id.to_string(),
                    serde_json::to_value(r.status).unwrap().as_str().unwrap().to_string(),
                    r.value.map(fmt_f64).unwrap_or_default(),
                    r.tolerance.clone(),
                    r.detail.clone(),
                ]
            }),
        )?,
        OutputFormat::Json => json_bytes(&rows)?,
    };
    let results = serde_json::json!({ "evolution": v.problem.system().variant_name(), "rows": rows.len() });
    Ok((rows, data, results))
}

const ID: &str = "";

impl Verifier<'_> {
    fn horizon(&self) -> f64 {
        self.problem.horizon()
    }

    fn probes(&self) -> &[TestFunction] {
        &self.cfg.experiment.probes
    }

    fn panels(&self) -> usize {
        self.problem.quadrature().panels()
    }

    /// Interior and end points of `[0, T]` used for deterministic checks.
    fn sample_times(&self) -> Vec<f64> {
        let t = self.horizon();
        vec![0.0, 0.25 * t, t / std::f64::consts::PI, 0.5 * t, 0.71 * t, t]
    }

    fn wiener(&self) -> bool {
        self.problem.chars().has_wiener()
    }

    fn evolution_identity(&self) -> levysee::Result<CheckRow> {
        let sys = self.problem.system();
        let mut worst: f64 = 0.0;
        for t in self.sample_times() {
            for psi in self.probes() {
                let u = sys.apply(t, t, psi)?;
                worst = worst.max((u.as_vector() - psi.as_vector()).amax());
            }
        }
        Ok(bounded(ID, ID, worst, self.cfg.verify.exact_tol, "max |U(t,t)ψ − ψ| over sample times and probes"))
    }

    fn evolution_cocycle(&self) -> levysee::Result<CheckRow> {
        let sys = self.problem.system();
        let tol = self.cfg.verify.exact_tol;
        if sys.is_exact() {
            let pts = self.sample_times();
            let mut worst: f64 = 0.0;
            for (i, &s) in pts.iter().enumerate() {
                for (j, &r) in pts.iter().enumerate().skip(i) {
                    for &t in &pts[j..] {
                        for psi in self.probes() {
                            let scale = psi.as_vector().norm().max(1.0) * sys.propagator(s, t)?.norm().max(1.0);
                            worst = worst.max(sys.cocycle_residual(s, r, t, psi)? / scale);
                        }
                    }
                }
            }
            return Ok(bounded(ID, ID, worst, tol, format!("{} system, scaled residual over sample triples", sys.variant_name())));
        }
        // Stepped systems: all three interval lengths are x·Δ with frac(x) in
        // (½, 1), so every step count ⌈x⌉ exactly doubles when Δ halves.
        let delta = self.cfg.evolution.substep().expect("stepped variants carry a substep");
        let x = self.horizon() / delta;
        if x < 8.0 {
            return Ok(skipped(ID, ID, format!("substep {delta} too coarse for a refinement test (T/Δ = {x:.2} < 8)")));
        }
        let (s, r, t) = (0.0, ((0.3 * x).floor() + 0.9) * delta, ((0.9 * x).floor() + 0.6) * delta);
        let fine = self.cfg.problem_with_substep(self.cfg.experiment.index, 0.5)?;
        let psi = &self.probes()[0];
        let coarse_res = sys.cocycle_residual(s, r, t, psi)?;
        let fine_res = fine.system().cocycle_residual(s, r, t, psi)?;
        if coarse_res <= tol && fine_res <= tol {
            return Ok(bounded(ID, ID, coarse_res.max(fine_res), tol, "stepping is exact to rounding for this generator"));
        }
        let mut row = ratio_row(ID, ID, &[coarse_res / fine_res], 4.0, self.cfg.verify.ratio_window);
        row.detail = format!("residual {coarse_res:.3e} at Δ={delta}, {fine_res:.3e} at Δ/2; {}", row.detail);
        Ok(row)
    }

    fn transpose_duality(&self) -> levysee::Result<CheckRow> {
        let sys = self.problem.system();
        let n = self.problem.dim();
        let pts = self.sample_times();
        let mut worst: f64 = 0.0;
        for (i, &s) in pts.iter().enumerate() {
            for &t in &pts[i..] {
                for psi in self.probes() {
                    let u_psi = sys.apply(s, t, psi)?;
                    for k in 0..n {
                        let f = DualVector::unit(n, k);
                        let lhs = sys.apply_dual(t, s, &f)?.as_vector().dot(psi.as_vector());
                        let rhs = u_psi.coeffs()[k];
                        worst = worst.max((lhs - rhs).abs() / rhs.abs().max(1.0));
                    }
                }
            }
        }
        Ok(bounded(ID, ID, worst, self.cfg.verify.exact_tol, "max over unit functionals, probes and sample pairs"))
    }

    fn equation_order(&self, forward: bool) -> levysee::Result<CheckRow> {
        let sys = self.problem.system();
        if !sys.is_exact() {
            return Ok(skipped(ID, ID, "stepped propagators carry stepping error that masks the quadrature order"));
        }
        if sys.variant_name() == "identity" {
            return Ok(skipped(ID, ID, "residual vanishes identically for the identity system"));
        }
        let t = self.horizon();
        let mut ratios = Vec::new();
        let mut tiny = 0;
        for psi in self.probes() {
            let res = |panels| {
                if forward {
                    sys.forward_residual(0.0, t, psi, panels)
                } else {
                    sys.backward_residual(0.0, t, psi, panels)
                }
            };
            let (coarse, fine) = (res(4)?, res(8)?);
            if fine <= 1e-13 * psi.as_vector().norm().max(1.0) {
                tiny += 1;
            } else {
                ratios.push(coarse / fine);
            }
        }
        if ratios.is_empty() {
            return Ok(skipped(ID, ID, format!("all {tiny} residuals at rounding level; order not resolvable")));
        }
        Ok(ratio_row(ID, ID, &ratios, 16.0, self.cfg.verify.ratio_window))
    }

    fn weak_strong(&self) -> levysee::Result<CheckRow> {
        let (r, chars) = (self.problem.integrand(), self.problem.chars());
        let mut worst: f64 = 0.0;
        for rep in &self.paths {
            let strong = levy_integral(r, &rep.path, chars, self.panels())?;
            for psi in self.probes() {
                let weak = weak_levy_integral(r, psi, &rep.path, chars, self.panels())?;
                for (k, w) in weak.iter().enumerate() {
                    let v = strong.value(k);
                    let scale = (v.norm() * psi.as_vector().norm()).max(1.0);
                    worst = worst.max((v.dot(psi.as_vector()) - w).abs() / scale);
                }
            }
        }
        Ok(bounded(ID, ID, worst, self.cfg.verify.exact_tol, format!("{} paths, scaled", self.paths.len())))
    }

    fn ito_sum(&self) -> levysee::Result<CheckRow> {
        let chars = self.problem.chars();
        let mut worst: f64 = 0.0;
        for rep in &self.paths {
            for t in rep.path.effective_times() {
                let total = rep.path.evaluate(chars, t)?;
                let parts = rep.path.ito_components(chars, t)?.total();
                worst = worst.max((total.as_vector() - parts.as_vector()).norm() / total.as_vector().norm().max(1.0));
            }
        }
        Ok(bounded(ID, ID, worst, self.cfg.verify.exact_tol, "max over effective grid nodes"))
    }

    fn char_functional(&self) -> levysee::Result<CheckRow> {
        let chars = self.problem.chars();
        let grid = self.problem.grid();
        let ens = &self.ensemble;
        let times: Vec<f64> = self.cfg.experiment.times.iter().copied().filter(|&t| t > 0.0).collect();
        if times.is_empty() {
            return Ok(skipped(ID, ID, "no positive experiment times"));
        }
        let samples: Vec<Vec<DVector<f64>>> = ens
            .map(|r| {
                let path = LevyPath::simulate(chars, grid, ens.replica_seed("levy", r))?;
                times.iter().map(|&t| path.evaluate(chars, t).map(DualVector::into_vector)).collect()
            })
            .into_iter()
            .collect::<levysee::Result<_>>()?;
        let mut z = Vec::new();
        for (i, &t) in times.iter().enumerate() {
            for psi in self.probes() {
                let xs: Vec<f64> = samples.iter().map(|s| s[i].dot(psi.as_vector())).collect();
                let est = empirical_char(&xs, 1.0)?;
                let diff = (est.estimate - chars.char_functional(t, psi)?).norm();
                z.push(zscore(diff, est.stderr, self.cfg.verify.exact_tol));
            }
        }
        Ok(mc_row(ID, ID, &z, self.cfg.verify.sigma))
    }

    /// Per-level sums of `stat` over the pathwise replicas, refined
    /// `verify.refinements` times.
    fn refinement_levels(
        &self,
        stat: impl Fn(&Replica) -> levysee::Result<Vec<f64>>,
    ) -> levysee::Result<Vec<Vec<f64>>> {
        let mut reps = self.paths.clone();
        let mut levels = Vec::new();
        for level in 0..=self.cfg.verify.refinements {
            let mut acc: Vec<f64> = Vec::new();
            for rep in &reps {
                let s = stat(rep)?;
                if acc.is_empty() {
                    acc = vec![0.0; s.len()];
                }
                acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
            }
            levels.push(acc);
            if level < self.cfg.verify.refinements {
                reps = reps.iter().map(|r| r.refine(self.problem.chars())).collect::<levysee::Result<_>>()?;
            }
        }
        Ok(levels)
    }

    /// Halving ratios of each statistic across refinement levels.
    fn halving_row(&self, levels: &[Vec<f64>]) -> CheckRow {
        let mut ratios = Vec::new();
        for j in 0..levels[0].len() {
            ratios.extend(successive_ratios(&levels.iter().map(|l| l[j]).collect::<Vec<_>>()));
        }
        let mut row = ratio_row(ID, ID, &ratios, 2.0, self.cfg.verify.ratio_window);
        row.detail = format!("Wiener grid bias is first order; {}", row.detail);
        row
    }

    /// Wiener-free pathwise identities. With an exact evolution system the
    /// scaled residual `stat` must stay below `tol`; a stepped system carries
    /// second-order stepping error, checked by halving the substep.
    fn deterministic_row(
        &self,
        tol: f64,
        what: &str,
        stat: impl Fn(&SeeProblem, &Replica) -> levysee::Result<f64>,
    ) -> levysee::Result<CheckRow> {
        if self.problem.system().is_exact() {
            let mut worst: f64 = 0.0;
            for rep in &self.paths {
                worst = worst.max(stat(&self.problem, rep)?);
            }
            return Ok(bounded(ID, ID, worst, tol, what));
        }
        let mut levels = Vec::new();
        for l in 0..=self.cfg.verify.refinements {
            let p = self.cfg.problem_with_substep(self.cfg.experiment.index, 0.5f64.powi(l as i32))?;
            let mut acc = 0.0;
            for rep in &self.paths {
                acc += stat(&p, rep)?;
            }
            levels.push(acc);
        }
        if levels.iter().all(|&x| x <= tol * self.paths.len() as f64) {
            return Ok(bounded(ID, ID, max_of(levels.iter().copied()), tol * self.paths.len() as f64, "stepping exact to rounding"));
        }
        let mut row = ratio_row(ID, ID, &successive_ratios(&levels), 4.0, self.cfg.verify.ratio_window);
        row.detail = format!("stepped system, substep halving; {}", row.detail);
        Ok(row)
    }

    /// Wiener-driven identities hold only up to the first-order grid bias of
    /// the Itô impulses, checked by Brownian-bridge refinement of the paths.
    fn wiener_row(&self, stat: impl Fn(&Replica) -> levysee::Result<Vec<f64>>) -> levysee::Result<CheckRow> {
        if !self.problem.system().is_exact() {
            return Ok(skipped(
                ID,
                ID,
                "Wiener grid bias and stepping error have different orders; use an exact evolution variant",
            ));
        }
        Ok(self.halving_row(&self.refinement_levels(stat)?))
    }

    fn weak_solution(&self) -> levysee::Result<CheckRow> {
        let p = &self.problem;
        if self.wiener() {
            let psi = &self.probes()[0];
            return self.wiener_row(|rep| {
                let sol = mild_solution(p, rep)?;
                Ok(vec![*weak_solution_residuals(p, &sol, &rep.path, psi)?.last().unwrap()])
            });
        }
        self.deterministic_row(self.cfg.verify.quadrature_tol, "scaled residual over output nodes and probes", |p, rep| {
            let sol = mild_solution(p, rep)?;
            let scale = max_of(sol.values.iter().map(|v| v.norm())).max(1.0);
            let mut worst: f64 = 0.0;
            for psi in self.probes() {
                let res = weak_solution_residuals(p, &sol, &rep.path, psi)?;
                worst = worst.max(max_of(res) / (scale * psi.as_vector().norm().max(1.0)));
            }
            Ok(worst)
        })
    }

    fn fubini(&self) -> levysee::Result<CheckRow> {
        let t = self.horizon();
        if self.wiener() {
            let (p, psi) = (&self.problem, &self.probes()[0]);
            return self.wiener_row(|rep| {
                let f = fubini_residual(p, &rep.path, psi, t)?;
                Ok(vec![f.r1, f.r2])
            });
        }
        self.deterministic_row(self.cfg.verify.quadrature_tol, "both residuals at the horizon, scaled", |p, rep| {
            let mut worst: f64 = 0.0;
            for psi in self.probes() {
                let f = fubini_residual(p, &rep.path, psi, t)?;
                worst = worst.max(f.r1.max(f.r2) / f.line2.abs().max(1.0));
            }
            Ok(worst)
        })
    }

    fn mild_vs_cadlag(&self) -> levysee::Result<CheckRow> {
        let p = &self.problem;
        if self.wiener() {
            return self.wiener_row(|rep| Ok(vec![ou_cadlag(p, rep)?.max_gap(&mild_solution(p, rep)?)?]));
        }
        let exact = p.quadrature() == Quadrature::Exponential;
        let tol = if exact { self.cfg.verify.exact_tol } else { self.cfg.verify.quadrature_tol };
        let what = if exact { "closed-form kernel, scaled max gap" } else { "quadrature kernel, scaled max gap" };
        self.deterministic_row(tol, what, |p, rep| {
            let x = mild_solution(p, rep)?;
            let scale = max_of(x.values.iter().map(|v| v.norm())).max(1.0);
            Ok(ou_cadlag(p, rep)?.max_gap(&x)? / scale)
        })
    }

    fn cadlag_jumps(&self) -> levysee::Result<CheckRow> {
        let p = &self.problem;
        let Some(b) = p.integrand().as_constant() else {
            return Err(levysee::Error::Mode("jump sizes are checked for a constant integrand B′".into()));
        };
        let mut worst: f64 = 0.0;
        let mut jumps = 0;
        for rep in &self.paths {
            let z = ou_cadlag(p, rep)?;
            for j in rep.path.jumps() {
                let k = z.index_of(j.time)?;
                let dl: DVector<f64> = b * p.chars().atoms()[j.atom].mark.as_vector();
                worst = worst.max((&z.values[k] - &z.left_limits[k] - &dl).norm() / dl.norm().max(1.0));
                jumps += 1;
            }
        }
        if jumps == 0 {
            return Ok(skipped(ID, ID, "no jumps in the sampled paths"));
        }
        Ok(bounded(ID, ID, worst, self.cfg.verify.exact_tol, format!("{jumps} jumps")))
    }

    fn flow_composition(&self) -> levysee::Result<CheckRow> {
        let p = &self.problem;
        if !p.system().is_exact() {
            return Ok(skipped(ID, ID, "stepped propagators compose only to stepping order"));
        }
        let t = self.horizon();
        let triples = [(0.0, 0.5 * t, t), (0.1 * t, t / std::f64::consts::PI, 0.9 * t), (0.25 * t, 0.25 * t, 0.75 * t)];
        let n = p.dim();
        let mut gs: Vec<DualVector> = (0..n).map(|k| DualVector::unit(n, k)).collect();
        gs.push(DualVector::new(self.cfg.initial.mean.clone())?);
        let mut worst: f64 = 0.0;
        for rep in &self.paths {
            for &(s, r, u) in &triples {
                for g in &gs {
                    let scale = flow_apply(p, &rep.path, s, u, g)?.as_vector().norm().max(1.0);
                    worst = worst.max(flow_composition_residual(p, &rep.path, s, r, u, g)? / scale);
                }
            }
        }
        Ok(bounded(ID, ID, worst, self.cfg.verify.exact_tol, "scaled, over unit and mean initial values"))
    }

    fn markov(&self) -> levysee::Result<CheckRow> {
        let t = self.horizon();
        let m = markov_diagnostic(&self.problem, 0.4 * t, 0.5 * t, &self.probes()[0], &self.ensemble)?;
        let sigma = self.cfg.verify.sigma;
        let mut row = mc_row(ID, ID, &[zscore(m.gap, m.se, self.cfg.verify.exact_tol)], sigma);
        row.detail = format!("gap {:.3e}, bootstrap SE {:.3e}; {}", m.gap, m.se, row.detail);
        Ok(row)
    }

    fn covariance_oracle(&self) -> levysee::Result<CheckRow> {
        let p = &self.problem;
        let Some(a) = p.system().homogeneous_rates() else {
            return Ok(skipped(ID, ID, "closed form needs a time-homogeneous diagonal system"));
        };
        let Some(b) = p.integrand().as_constant() else {
            return Ok(skipped(ID, ID, "closed form needs a constant integrand"));
        };
        let chars = p.chars();
        if chars.is_approximate() {
            return Ok(skipped(ID, ID, "small jumps are truncated"));
        }
        let n = p.dim();
        let mut jump_cov = chars.covariance().clone();
        for atom in chars.atoms() {
            let m = atom.mark.as_vector();
            jump_cov += atom.rate * m * m.transpose();
        }
        let c = b * jump_cov * b.transpose();
        let sigma0 = self.cfg.initial.covariance.clone().unwrap_or_else(|| DMatrix::zeros(n, n));
        let oracle = |t: f64, psi: &DVector<f64>| {
            let mut v = 0.0;
            for k in 0..n {
                for l in 0..n {
                    let s = a[k] + a[l];
                    let integral = if s == 0.0 { t } else { (s * t).exp_m1() / s };
                    v += psi[k] * psi[l] * (sigma0[(k, l)] * (s * t).exp() + c[(k, l)] * integral);
                }
            }
            v
        };
        let times: Vec<f64> = self.cfg.experiment.times.iter().copied().filter(|&t| t > 0.0).collect();
        let ens = &self.ensemble;
        let samples: Vec<Vec<DVector<f64>>> = ens
            .map(|r| {
                let sol = mild_solution(p, &p.replica(ens, r)?)?;
                times.iter().map(|&t| sol.value_at(t).map(DualVector::into_vector)).collect()
            })
            .into_iter()
            .collect::<levysee::Result<_>>()?;
        let mut z = Vec::new();
        for (i, &t) in times.iter().enumerate() {
            for psi in self.probes() {
                let col: Vec<f64> = samples.iter().map(|s| s[i].dot(psi.as_vector())).collect();
                let est = variance_and_stderr(&col);
                let exact = oracle(t, psi.as_vector());
                z.push(zscore((est.mean - exact).abs(), est.stderr, self.cfg.verify.exact_tol));
            }
        }
        if z.is_empty() {
            return Ok(skipped(ID, ID, "no positive experiment times"));
        }
        Ok(mc_row(ID, ID, &z, self.cfg.verify.sigma))
    }

    fn square_moment(&self) -> levysee::Result<CheckRow> {
        let family = self.cfg.family()?;
        let t = self.horizon();
        // Monotonicity holds replica by replica, so a small ensemble suffices.
        let pathwise = Ensemble::new(self.cfg.verify.refinement_replicas, self.ensemble.seed);
        let values = (0..=family.max_level())
            .map(|l| square_moment_report(&self.problem, &pathwise, &family, l, t).map(|e| e.mean))
            .collect::<levysee::Result<Vec<f64>>>()?;
        let worst = max_of(values.windows(2).map(|w| w[1] - w[0]));
        let mut row = bounded(ID, ID, worst, 0.0, "");
        row.tolerance = "nonincreasing exactly".into();
        row.detail = format!("levels 0..={}: {}", family.max_level(), values.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(", "));
        Ok(row)
    }
}
