//! Run configuration: TOML schema, validation and problem construction.
//!
//! Parsing walks the TOML tree by hand so that every schema violation is
//! collected with its key path. Scalars that may depend on the sequence index
//! `n` (or on time `t`, or on mark coordinates `f1`…`fN`) are written either
//! as numbers or as expression strings; see [`crate::expr`]. The limit
//! problem evaluates them at `n = ∞`.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use sha2::{Digest, Sha256};
use toml::{Table, Value};

use levysee::evolution::ScalarFn;
use levysee::{
    DualVector, EvolutionSystem, GeneratorFamily, InitialCondition, IntegrandR, JumpAtom, LevyCharacteristics,
    Quadrature, SeeProblem, SeminormFamily, TestFunction, TimeGrid,
};

use crate::expr::{Allowed, Expr, Vars};

/// One schema or semantic violation, located by its dotted key path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.path.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.path, self.message)
        }
    }
}

/// Every issue found in a config, in discovery order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl ConfigErrors {
    pub fn mentions(&self, path: &str) -> bool {
        self.0.iter().any(|i| i.path == path)
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{} config error(s):", self.0.len())?;
        for issue in &self.0 {
            writeln!(f, "  {issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

#[derive(Debug, Clone, PartialEq)]
pub enum FamilySpec {
    Hermite { d: f64, levels: usize },
    Weights(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub dim: usize,
    pub horizon: f64,
    pub steps: usize,
    pub family: FamilySpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AtomSpec {
    pub rate: Expr,
    pub mark: Vec<Expr>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharsSpec {
    pub drift: Vec<Expr>,
    pub covariance: Vec<Vec<Expr>>,
    pub rho_level: usize,
    pub atoms: Vec<AtomSpec>,
    pub small_jump_eps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum EvolutionSpec {
    Identity,
    Diagonal { eigenvalues: Vec<Expr> },
    DiagonalTimeDependent { rates: Vec<Expr>, tol: f64 },
    Matrix { matrix: Vec<Vec<Expr>>, substep: f64 },
    Perturbed { eigenvalues: Vec<Expr>, perturbation: Vec<Vec<Expr>>, substep: f64 },
}

impl EvolutionSpec {
    pub fn substep(&self) -> Option<f64> {
        match self {
            EvolutionSpec::Matrix { substep, .. } | EvolutionSpec::Perturbed { substep, .. } => Some(*substep),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitialSpec {
    pub mean: Vec<f64>,
    pub covariance: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub replicas: usize,
    pub quadrature: Quadrature,
    pub probes: Vec<TestFunction>,
    pub times: Vec<f64>,
    pub level: usize,
    /// Sequence index used by `simulate` and `verify`; `None` is the limit.
    pub index: Option<usize>,
}

/// Tolerance policy of `verify`.
#[derive(Debug, Clone, PartialEq)]
pub struct VerifySpec {
    /// Identities that hold in exact arithmetic.
    pub exact_tol: f64,
    /// Identities that hold up to deterministic quadrature error.
    pub quadrature_tol: f64,
    /// Monte Carlo identities pass within `sigma` standard errors.
    pub sigma: f64,
    /// Relative half-width of refinement-ratio windows.
    pub ratio_window: f64,
    pub replicas: usize,
    pub refinements: usize,
    pub refinement_replicas: usize,
}

impl Default for VerifySpec {
    fn default() -> Self {
        Self {
            exact_tol: 1e-10,
            quadrature_tol: 1e-8,
            sigma: 3.0,
            ratio_window: 0.2,
            replicas: 2000,
            refinements: 3,
            refinement_replicas: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergeSpec {
    pub indices: Vec<usize>,
    pub q: usize,
    pub replicas: usize,
    pub skorokhod_replicas: usize,
    pub st_steps: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl OutputFormat {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "csv" => Some(OutputFormat::Csv),
            "json" => Some(OutputFormat::Json),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            OutputFormat::Csv => "csv",
            OutputFormat::Json => "json",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub dir: PathBuf,
    pub format: OutputFormat,
}

/// A fully validated run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub chars: CharsSpec,
    pub evolution: EvolutionSpec,
    /// `None` is the identity integrand.
    pub integrand: Option<Vec<Vec<Expr>>>,
    pub initial: InitialSpec,
    pub experiment: ExperimentSpec,
    pub verify: VerifySpec,
    pub converge: ConvergeSpec,
    pub output: OutputSpec,
    /// Hex SHA-256 of the config text.
    pub hash: String,
}

/// Parses and validates a config; on failure returns all issues found.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigErrors> {
    let table: Table = toml::from_str(text)
        .map_err(|e| ConfigErrors(vec![ConfigIssue { path: String::new(), message: format!("malformed TOML: {e}") }]))?;
    let mut ctx = Ctx::default();
    let cfg = walk(&mut ctx, &table, text);
    match cfg {
        Some(cfg) if ctx.issues.is_empty() => {
            semantic_checks(&mut ctx, &cfg);
            if ctx.issues.is_empty() {
                Ok(cfg)
            } else {
                Err(ConfigErrors(ctx.issues))
            }
        }
        _ => Err(ConfigErrors(ctx.issues)),
    }
}

pub fn hash_text(text: &str) -> String {
    Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}

fn index_value(n: Option<usize>) -> f64 {
    n.map_or(f64::INFINITY, |n| n as f64)
}

fn describe_index(n: Option<usize>) -> String {
    n.map_or("n=∞".to_string(), |n| format!("n={n}"))
}

fn eval_vec(exprs: &[Expr], n: f64) -> DVector<f64> {
    DVector::from_iterator(exprs.len(), exprs.iter().map(|e| e.eval(&Vars::at_n(n))))
}

fn eval_matrix(rows: &[Vec<Expr>], vars: &Vars) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), rows.first().map_or(0, Vec::len), |i, j| rows[i][j].eval(vars))
}

fn matrix_fn(rows: Vec<Vec<Expr>>, n: f64) -> impl Fn(f64) -> DMatrix<f64> + Send + Sync + 'static {
    move |t| eval_matrix(&rows, &Vars { t, k: 0.0, n, f: &[] })
}

impl RunConfig {
    pub fn dim(&self) -> usize {
        self.model.dim
    }

    pub fn horizon(&self) -> f64 {
        self.model.horizon
    }

    pub fn family(&self) -> levysee::Result<SeminormFamily> {
        match &self.model.family {
            FamilySpec::Hermite { d, levels } => SeminormFamily::hermite(self.model.dim, *d, *levels),
            FamilySpec::Weights(w) => SeminormFamily::from_weights(w.clone()),
        }
    }

    pub fn max_level(&self) -> usize {
        match &self.model.family {
            FamilySpec::Hermite { levels, .. } => *levels,
            FamilySpec::Weights(w) => w.len().saturating_sub(1),
        }
    }

    pub fn characteristics(&self, n: Option<usize>) -> levysee::Result<LevyCharacteristics> {
        let nv = index_value(n);
        let c = &self.chars;
        let atoms = c
            .atoms
            .iter()
            .map(|a| Ok(JumpAtom::new(a.rate.eval(&Vars::at_n(nv)), DualVector::from_vector(eval_vec(&a.mark, nv))?)))
            .collect::<levysee::Result<Vec<_>>>()?;
        let chars = LevyCharacteristics::new(
            DualVector::from_vector(eval_vec(&c.drift, nv))?,
            eval_matrix(&c.covariance, &Vars::at_n(nv)),
            atoms,
            &self.family()?,
            c.rho_level,
        )?;
        Ok(match c.small_jump_eps {
            Some(eps) => chars.with_truncation(eps),
            None => chars,
        })
    }

    /// The evolution system at index `n`; `substep_factor` scales the
    /// stepping size of the stepped variants.
    pub fn system(&self, n: Option<usize>, substep_factor: f64) -> levysee::Result<EvolutionSystem> {
        let nv = index_value(n);
        let dim = self.model.dim;
        match &self.evolution {
            EvolutionSpec::Identity => Ok(EvolutionSystem::identity(dim)),
            EvolutionSpec::Diagonal { eigenvalues } => EvolutionSystem::diagonal(eval_vec(eigenvalues, nv)),
            EvolutionSpec::DiagonalTimeDependent { rates, tol } => {
                let fns: Vec<ScalarFn> = rates
                    .iter()
                    .map(|e| {
                        let e = e.clone();
                        Arc::new(move |t: f64| e.eval(&Vars { t, k: 0.0, n: nv, f: &[] })) as ScalarFn
                    })
                    .collect();
                EvolutionSystem::diagonal_time_dependent(fns, *tol)
            }
            EvolutionSpec::Matrix { matrix, substep } => EvolutionSystem::general_matrix(
                GeneratorFamily::from_fn(dim, matrix_fn(matrix.clone(), nv)),
                substep * substep_factor,
            ),
            EvolutionSpec::Perturbed { eigenvalues, perturbation, substep } => EvolutionSystem::perturbed(
                &EvolutionSystem::diagonal(eval_vec(eigenvalues, nv))?,
                GeneratorFamily::from_fn(dim, matrix_fn(perturbation.clone(), nv)),
                substep * substep_factor,
            ),
        }
    }

    pub fn integrand(&self, n: Option<usize>) -> IntegrandR {
        let dim = self.model.dim;
        let nv = index_value(n);
        let Some(rows) = &self.integrand else {
            return IntegrandR::identity(dim);
        };
        let rows = rows.clone();
        let uses = |p: fn(&Expr) -> bool| rows.iter().flatten().any(p);
        if uses(Expr::uses_marks) {
            IntegrandR::mark_dependent(dim, dim, move |t, f| eval_matrix(&rows, &Vars { t, k: 0.0, n: nv, f: f.as_slice() }))
        } else if uses(Expr::uses_t) {
            IntegrandR::time_varying(dim, dim, matrix_fn(rows, nv))
        } else {
            IntegrandR::constant(eval_matrix(&rows, &Vars::at_n(nv)))
        }
    }

    pub fn initial_condition(&self) -> levysee::Result<InitialCondition> {
        let mean = DualVector::new(self.initial.mean.clone())?;
        match &self.initial.covariance {
            Some(q) => InitialCondition::gaussian(mean, q.clone()),
            None => Ok(InitialCondition::point(mean)),
        }
    }

    /// The problem at sequence index `n`; `None` is the limit.
    pub fn problem(&self, n: Option<usize>) -> levysee::Result<SeeProblem> {
        self.problem_with_substep(n, 1.0)
    }

    pub fn problem_with_substep(&self, n: Option<usize>, substep_factor: f64) -> levysee::Result<SeeProblem> {
        SeeProblem::new(
            self.system(n, substep_factor)?,
            self.integrand(n),
            self.initial_condition()?,
            self.characteristics(n)?,
            TimeGrid::uniform(self.model.horizon, self.model.steps)?,
            self.experiment.quadrature,
        )
    }

    /// Whether any entry depends on the sequence index.
    pub fn depends_on_index(&self) -> bool {
        let c = &self.chars;
        let mut all: Vec<&Expr> = c.drift.iter().chain(c.covariance.iter().flatten()).collect();
        for a in &c.atoms {
            all.push(&a.rate);
            all.extend(&a.mark);
        }
        match &self.evolution {
            EvolutionSpec::Identity => {}
            EvolutionSpec::Diagonal { eigenvalues } => all.extend(eigenvalues),
            EvolutionSpec::DiagonalTimeDependent { rates, .. } => all.extend(rates),
            EvolutionSpec::Matrix { matrix, .. } => all.extend(matrix.iter().flatten()),
            EvolutionSpec::Perturbed { eigenvalues, perturbation, .. } => {
                all.extend(eigenvalues);
                all.extend(perturbation.iter().flatten());
            }
        }
        if let Some(rows) = &self.integrand {
            all.extend(rows.iter().flatten());
        }
        all.into_iter().any(Expr::uses_n)
    }
}

#[derive(Default)]
struct Ctx {
    issues: Vec<ConfigIssue>,
    reported: BTreeSet<String>,
}

impl Ctx {
    fn err(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(ConfigIssue { path: path.into(), message: message.into() });
    }

    /// Records at most one semantic issue per path.
    fn err_once(&mut self, path: impl Into<String>, message: impl Into<String>) {
        let path = path.into();
        if self.reported.insert(path.clone()) {
            self.err(path, message);
        }
    }
}

fn join(base: &str, key: &str) -> String {
    if base.is_empty() {
        key.to_string()
    } else {
        format!("{base}.{key}")
    }
}

/// A TOML table being consumed; keys never read are reported as unknown.
struct Section<'a> {
    path: String,
    table: &'a Table,
    used: BTreeSet<&'static str>,
}

impl<'a> Section<'a> {
    fn new(path: impl Into<String>, table: &'a Table) -> Self {
        Self { path: path.into(), table, used: BTreeSet::new() }
    }

    fn at(&self, key: &str) -> String {
        join(&self.path, key)
    }

    fn opt(&mut self, key: &'static str) -> Option<&'a Value> {
        self.used.insert(key);
        self.table.get(key)
    }

    fn req(&mut self, ctx: &mut Ctx, key: &'static str) -> Option<&'a Value> {
        let v = self.opt(key);
        if v.is_none() {
            ctx.err(self.at(key), "missing required key");
        }
        v
    }

    fn sub(&mut self, ctx: &mut Ctx, key: &'static str) -> Option<Section<'a>> {
        let v = self.opt(key)?;
        match v.as_table() {
            Some(t) => Some(Section::new(self.at(key), t)),
            None => {
                ctx.err(self.at(key), format!("expected a table, found {}", v.type_str()));
                None
            }
        }
    }

    fn finish(self, ctx: &mut Ctx) {
        for key in self.table.keys() {
            if !self.used.contains(key.as_str()) {
                ctx.err(self.at(key), "unknown key");
            }
        }
    }

    fn f64_or(&mut self, ctx: &mut Ctx, key: &'static str, default: f64) -> Option<f64> {
        let path = self.at(key);
        self.opt(key).map_or(Some(default), |v| float(ctx, &path, v))
    }

    fn usize_or(&mut self, ctx: &mut Ctx, key: &'static str, default: usize) -> Option<usize> {
        let path = self.at(key);
        self.opt(key).map_or(Some(default), |v| count(ctx, &path, v))
    }

    fn positive_or(&mut self, ctx: &mut Ctx, key: &'static str, default: f64) -> Option<f64> {
        let path = self.at(key);
        let x = self.f64_or(ctx, key, default)?;
        if x > 0.0 {
            Some(x)
        } else {
            ctx.err(path, format!("must be positive, got {x}"));
            None
        }
    }
}

fn float(ctx: &mut Ctx, path: &str, v: &Value) -> Option<f64> {
    let x = match v {
        Value::Integer(i) => *i as f64,
        Value::Float(x) => *x,
        other => {
            ctx.err(path, format!("expected a number, found {}", other.type_str()));
            return None;
        }
    };
    if x.is_finite() {
        Some(x)
    } else {
        ctx.err(path, "must be finite");
        None
    }
}

fn count(ctx: &mut Ctx, path: &str, v: &Value) -> Option<usize> {
    match v {
        Value::Integer(i) if *i >= 0 => Some(*i as usize),
        Value::Integer(i) => {
            ctx.err(path, format!("must be a nonnegative integer, got {i}"));
            None
        }
        other => {
            ctx.err(path, format!("expected an integer, found {}", other.type_str()));
            None
        }
    }
}

fn string<'a>(ctx: &mut Ctx, path: &str, v: &'a Value) -> Option<&'a str> {
    match v.as_str() {
        Some(s) => Some(s),
        None => {
            ctx.err(path, format!("expected a string, found {}", v.type_str()));
            None
        }
    }
}

fn expr(ctx: &mut Ctx, path: &str, v: &Value, allowed: Allowed) -> Option<Expr> {
    match v {
        Value::String(s) => Expr::parse(s, allowed).map_err(|e| ctx.err(path, e)).ok(),
        Value::Integer(_) | Value::Float(_) => float(ctx, path, v).map(Expr::constant),
        other => {
            ctx.err(path, format!("expected a number or expression string, found {}", other.type_str()));
            None
        }
    }
}

/// Parses an array element-wise, collecting every element error.
fn array<T>(
    ctx: &mut Ctx,
    path: &str,
    v: &Value,
    len: Option<usize>,
    mut item: impl FnMut(&mut Ctx, &str, &Value) -> Option<T>,
) -> Option<Vec<T>> {
    let Some(items) = v.as_array() else {
        ctx.err(path, format!("expected an array, found {}", v.type_str()));
        return None;
    };
    if let Some(len) = len {
        if items.len() != len {
            ctx.err(path, format!("expected {len} entries, found {}", items.len()));
            return None;
        }
    }
    let mut out = Vec::with_capacity(items.len());
    let mut ok = true;
    for (i, x) in items.iter().enumerate() {
        match item(ctx, &format!("{path}[{i}]"), x) {
            Some(y) => out.push(y),
            None => ok = false,
        }
    }
    ok.then_some(out)
}

/// `dim` is `None` when the model dimension itself failed to parse; lengths
/// are then left unchecked.
fn expr_vec(ctx: &mut Ctx, path: &str, v: &Value, dim: Option<usize>, allowed: Allowed) -> Option<Vec<Expr>> {
    array(ctx, path, v, dim, |c, p, x| expr(c, p, x, allowed))
}

fn expr_matrix(ctx: &mut Ctx, path: &str, v: &Value, dim: Option<usize>, allowed: Allowed) -> Option<Vec<Vec<Expr>>> {
    array(ctx, path, v, dim, |c, p, row| expr_vec(c, p, row, dim, allowed))
}

fn float_vec(ctx: &mut Ctx, path: &str, v: &Value, len: Option<usize>) -> Option<Vec<f64>> {
    array(ctx, path, v, len, float)
}

fn float_matrix(ctx: &mut Ctx, path: &str, v: &Value, dim: Option<usize>) -> Option<DMatrix<f64>> {
    let rows = array(ctx, path, v, dim, |c, p, row| float_vec(c, p, row, dim))?;
    let n = dim?;
    Some(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

fn walk(ctx: &mut Ctx, root: &Table, text: &str) -> Option<RunConfig> {
    let mut top = Section::new("", root);
    let (dim, horizon, model) = match top.sub(ctx, "model") {
        Some(s) => model_section(ctx, s),
        None => {
            if !root.contains_key("model") {
                ctx.err("model", "missing required section");
            }
            (None, None, None)
        }
    };
    // Dimension-dependent sections are walked even when the model is invalid
    // so that unrelated errors surface in the same pass.
    let n = dim.unwrap_or(0);
    let chars = match top.sub(ctx, "chars") {
        Some(s) => chars_section(ctx, s, dim),
        None => Some(CharsSpec {
            drift: vec![Expr::constant(0.0); n],
            covariance: vec![vec![Expr::constant(0.0); n]; n],
            rho_level: 0,
            atoms: Vec::new(),
            small_jump_eps: None,
        }),
    };
    let evolution = match top.sub(ctx, "evolution") {
        Some(s) => evolution_section(ctx, s, dim),
        None => {
            if !root.contains_key("evolution") {
                ctx.err("evolution", "missing required section");
            }
            None
        }
    };
    let integrand = match top.sub(ctx, "integrand") {
        Some(mut s) => {
            let allowed = Allowed { t: true, n: true, marks: n, k: false };
            let m = s.req(ctx, "matrix").and_then(|v| expr_matrix(ctx, "integrand.matrix", v, dim, allowed));
            s.finish(ctx);
            m.map(Some)
        }
        None => Some(None),
    };
    let initial = match top.sub(ctx, "initial") {
        Some(s) => initial_section(ctx, s, dim),
        None => Some(InitialSpec { mean: vec![0.0; n], covariance: None }),
    };
    let experiment = match top.sub(ctx, "experiment") {
        Some(s) => experiment_section(ctx, s, dim, horizon),
        None => experiment_section(ctx, Section::new("experiment", &Table::new()), dim, horizon),
    };
    let verify = match top.sub(ctx, "verify") {
        Some(s) => verify_section(ctx, s),
        None => Some(VerifySpec::default()),
    };
    let default_q = model.as_ref().map_or(0, |m| match &m.family {
        FamilySpec::Hermite { levels, .. } => *levels,
        FamilySpec::Weights(w) => w.len().saturating_sub(1),
    });
    let converge = match top.sub(ctx, "converge") {
        Some(s) => converge_section(ctx, s, default_q),
        None => converge_section(ctx, Section::new("converge", &Table::new()), default_q),
    };
    let output = match top.sub(ctx, "output") {
        Some(s) => output_section(ctx, s),
        None => Some(OutputSpec { dir: PathBuf::from("out"), format: OutputFormat::Csv }),
    };
    top.finish(ctx);
    Some(RunConfig {
        model: model?,
        chars: chars?,
        evolution: evolution?,
        integrand: integrand?,
        initial: initial?,
        experiment: experiment?,
        verify: verify?,
        converge: converge?,
        output: output?,
        hash: hash_text(text),
    })
}

/// Returns the dimension and horizon separately so that they stay usable when
/// other model keys are invalid.
fn model_section(ctx: &mut Ctx, mut s: Section) -> (Option<usize>, Option<f64>, Option<ModelSpec>) {
    let dim = s.req(ctx, "dim").and_then(|v| count(ctx, "model.dim", v));
    let dim = match dim {
        Some(0) => {
            ctx.err("model.dim", "must be at least 1");
            None
        }
        d => d,
    };
    let horizon = s.positive_or(ctx, "horizon", 1.0);
    let steps = s.usize_or(ctx, "steps", 10);
    if steps == Some(0) {
        ctx.err("model.steps", "must be at least 1");
    }
    let family = match s.sub(ctx, "family") {
        Some(f) => family_section(ctx, f, dim.unwrap_or(0)),
        None => Some(FamilySpec::Hermite { d: 1.0, levels: 2 }),
    };
    s.finish(ctx);
    let spec = (|| Some(ModelSpec { dim: dim?, horizon: horizon?, steps: steps.filter(|&s| s > 0)?, family: family? }))();
    (dim, horizon, spec)
}

fn family_section(ctx: &mut Ctx, mut s: Section, dim: usize) -> Option<FamilySpec> {
    let kind = s.opt("kind").map_or(Some("hermite"), |v| string(ctx, "model.family.kind", v));
    let out = match kind? {
        "hermite" => {
            let d = s.positive_or(ctx, "d", 1.0);
            let levels = s.usize_or(ctx, "levels", 2);
            Some(FamilySpec::Hermite { d: d?, levels: levels? })
        }
        "weights" => {
            let levels = s.req(ctx, "levels").and_then(|v| {
                array(ctx, "model.family.levels", v, None, |c, p, lvl| match lvl {
                    Value::String(_) => {
                        let e = expr(c, p, lvl, Allowed { k: true, ..Allowed::NONE })?;
                        Some((0..dim).map(|k| e.eval(&Vars { t: 0.0, k: k as f64, n: 0.0, f: &[] })).collect())
                    }
                    _ => float_vec(c, p, lvl, Some(dim)),
                })
            });
            let levels: Vec<Vec<f64>> = levels?;
            let mut ok = !levels.is_empty();
            if levels.is_empty() {
                ctx.err("model.family.levels", "needs at least one level");
            }
            for (l, w) in levels.iter().enumerate() {
                if let Some(k) = w.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
                    ctx.err(format!("model.family.levels[{l}]"), format!("weight {k} must be positive and finite"));
                    ok = false;
                }
                if l > 0 && w.iter().zip(&levels[l - 1]).any(|(a, b)| a < b) {
                    ctx.err(format!("model.family.levels[{l}]"), "weights must not decrease with level");
                    ok = false;
                }
            }
            ok.then_some(FamilySpec::Weights(levels))
        }
        other => {
            ctx.err("model.family.kind", format!("unknown family kind {other:?} (expected \"hermite\" or \"weights\")"));
            None
        }
    };
    s.finish(ctx);
    out
}

fn chars_section(ctx: &mut Ctx, mut s: Section, dim: Option<usize>) -> Option<CharsSpec> {
    let n = dim.unwrap_or(0);
    let drift = s.opt("drift").map_or(Some(vec![Expr::constant(0.0); n]), |v| {
        expr_vec(ctx, "chars.drift", v, dim, Allowed::n())
    });
    let covariance = s.opt("covariance").map_or(Some(vec![vec![Expr::constant(0.0); n]; n]), |v| {
        expr_matrix(ctx, "chars.covariance", v, dim, Allowed::n())
    });
    let rho_level = s.usize_or(ctx, "rho_level", 0);
    let small_jump_eps = match s.opt("small_jump_eps") {
        None => Some(None),
        Some(v) => match float(ctx, "chars.small_jump_eps", v) {
            Some(x) if x > 0.0 => Some(Some(x)),
            Some(x) => {
                ctx.err("chars.small_jump_eps", format!("must be positive, got {x}"));
                None
            }
            None => None,
        },
    };
    let atoms = s.opt("atoms").map_or(Some(Vec::new()), |v| {
        array(ctx, "chars.atoms", v, None, |c, p, a| {
            let Some(t) = a.as_table() else {
                c.err(p, format!("expected a table, found {}", a.type_str()));
                return None;
            };
            let mut sec = Section::new(p, t);
            let rate = sec.req(c, "rate").and_then(|v| expr(c, &format!("{p}.rate"), v, Allowed::n()));
            let mark = sec.req(c, "mark").and_then(|v| expr_vec(c, &format!("{p}.mark"), v, dim, Allowed::n()));
            sec.finish(c);
            Some(AtomSpec { rate: rate?, mark: mark? })
        })
    });
    s.finish(ctx);
    Some(CharsSpec {
        drift: drift?,
        covariance: covariance?,
        rho_level: rho_level?,
        atoms: atoms?,
        small_jump_eps: small_jump_eps?,
    })
}

fn evolution_section(ctx: &mut Ctx, mut s: Section, n: Option<usize>) -> Option<EvolutionSpec> {
    let variant = s.req(ctx, "variant").and_then(|v| string(ctx, "evolution.variant", v));
    let out = match variant? {
        "identity" => Some(EvolutionSpec::Identity),
        "diagonal" => s
            .req(ctx, "eigenvalues")
            .and_then(|v| expr_vec(ctx, "evolution.eigenvalues", v, n, Allowed::n()))
            .map(|eigenvalues| EvolutionSpec::Diagonal { eigenvalues }),
        "diagonal_time_dependent" => {
            let rates = s.req(ctx, "rates").and_then(|v| expr_vec(ctx, "evolution.rates", v, n, Allowed::tn()));
            let tol = s.positive_or(ctx, "tol", levysee::evolution::DEFAULT_EXPONENT_TOL);
            Some(EvolutionSpec::DiagonalTimeDependent { rates: rates?, tol: tol? })
        }
        "matrix" => {
            let matrix = s.req(ctx, "matrix").and_then(|v| expr_matrix(ctx, "evolution.matrix", v, n, Allowed::tn()));
            let substep = s.positive_or(ctx, "substep", 0.01);
            Some(EvolutionSpec::Matrix { matrix: matrix?, substep: substep? })
        }
        "perturbed" => {
            let eigenvalues =
                s.req(ctx, "eigenvalues").and_then(|v| expr_vec(ctx, "evolution.eigenvalues", v, n, Allowed::n()));
            let perturbation = s
                .req(ctx, "perturbation")
                .and_then(|v| expr_matrix(ctx, "evolution.perturbation", v, n, Allowed::tn()));
            let substep = s.positive_or(ctx, "substep", 0.01);
            Some(EvolutionSpec::Perturbed { eigenvalues: eigenvalues?, perturbation: perturbation?, substep: substep? })
        }
        other => {
            ctx.err(
                "evolution.variant",
                format!(
                    "unknown variant {other:?} (expected identity, diagonal, diagonal_time_dependent, matrix or perturbed)"
                ),
            );
            None
        }
    };
    s.finish(ctx);
    out
}

fn initial_section(ctx: &mut Ctx, mut s: Section, n: Option<usize>) -> Option<InitialSpec> {
    let mean = s.opt("mean").map_or(Some(vec![0.0; n.unwrap_or(0)]), |v| float_vec(ctx, "initial.mean", v, n));
    let covariance = match s.opt("covariance") {
        None => Some(None),
        Some(v) => float_matrix(ctx, "initial.covariance", v, n).map(Some),
    };
    s.finish(ctx);
    Some(InitialSpec { mean: mean?, covariance: covariance? })
}

fn experiment_section(
    ctx: &mut Ctx,
    mut s: Section,
    dim: Option<usize>,
    horizon: Option<f64>,
) -> Option<ExperimentSpec> {
    let n = dim.unwrap_or(0);
    let seed = match s.opt("seed") {
        None => Some(0),
        Some(Value::Integer(i)) if *i >= 0 => Some(*i as u64),
        Some(Value::String(x)) => x.parse::<u64>().map_err(|_| ctx.err("experiment.seed", "not a u64")).ok(),
        Some(_) => {
            ctx.err("experiment.seed", "expected a nonnegative integer or a decimal string");
            None
        }
    };
    let replicas = s.usize_or(ctx, "replicas", 100);
    if replicas == Some(0) {
        ctx.err("experiment.replicas", "must be at least 1");
    }
    let kind = s.opt("quadrature").map_or(Some("simpson"), |v| string(ctx, "experiment.quadrature", v));
    let panels = s.usize_or(ctx, "panels", 4);
    let quadrature = match (kind, panels) {
        (Some("simpson"), Some(p)) if p > 0 => Some(Quadrature::Simpson { panels: p }),
        (Some("simpson"), Some(_)) => {
            ctx.err("experiment.panels", "must be at least 1");
            None
        }
        (Some("exponential"), _) => Some(Quadrature::Exponential),
        (Some(other), _) => {
            ctx.err("experiment.quadrature", format!("unknown rule {other:?} (expected \"simpson\" or \"exponential\")"));
            None
        }
        _ => None,
    };
    let probes = match s.opt("probes") {
        None => Some((0..n).map(|k| TestFunction::unit(n, k)).collect()),
        Some(v) => array(ctx, "experiment.probes", v, None, |c, p, x| {
            float_vec(c, p, x, dim).and_then(|v| TestFunction::new(v).map_err(|e| c.err(p, e.to_string())).ok())
        }),
    };
    let times = match s.opt("times") {
        None => Some(vec![horizon.unwrap_or(1.0)]),
        Some(v) => array(ctx, "experiment.times", v, None, |c, p, x| {
            let t = float(c, p, x)?;
            match horizon {
                Some(h) if !(0.0..=h).contains(&t) => {
                    c.err(p, format!("time {t} outside [0, {h}]"));
                    None
                }
                _ => Some(t),
            }
        }),
    };
    let level = s.usize_or(ctx, "level", 0);
    let index = match s.opt("index") {
        None => Some(None),
        Some(v) => match count(ctx, "experiment.index", v) {
            Some(0) => {
                ctx.err("experiment.index", "sequence indices start at 1 (omit the key for the limit)");
                None
            }
            other => other.map(Some),
        },
    };
    s.finish(ctx);
    let replicas = replicas.filter(|&r| r > 0);
    Some(ExperimentSpec {
        seed: seed?,
        replicas: replicas?,
        quadrature: quadrature?,
        probes: probes?,
        times: times?,
        level: level?,
        index: index?,
    })
}

fn verify_section(ctx: &mut Ctx, mut s: Section) -> Option<VerifySpec> {
    let d = VerifySpec::default();
    let exact_tol = s.positive_or(ctx, "exact_tol", d.exact_tol);
    let quadrature_tol = s.positive_or(ctx, "quadrature_tol", d.quadrature_tol);
    let sigma = s.positive_or(ctx, "sigma", d.sigma);
    let ratio_window = s.positive_or(ctx, "ratio_window", d.ratio_window);
    if ratio_window.is_some_and(|w| w >= 1.0) {
        ctx.err("verify.ratio_window", "must be below 1");
    }
    let replicas = s.usize_or(ctx, "replicas", d.replicas);
    if replicas.is_some_and(|r| r < levysee::ou_solver::MIN_CHAR_ENSEMBLE) {
        ctx.err(
            "verify.replicas",
            format!("characteristic-function checks need at least {} replicas", levysee::ou_solver::MIN_CHAR_ENSEMBLE),
        );
    }
    let refinements = s.usize_or(ctx, "refinements", d.refinements);
    if refinements == Some(0) {
        ctx.err("verify.refinements", "must be at least 1");
    }
    let refinement_replicas = s.usize_or(ctx, "refinement_replicas", d.refinement_replicas);
    if refinement_replicas == Some(0) {
        ctx.err("verify.refinement_replicas", "must be at least 1");
    }
    s.finish(ctx);
    Some(VerifySpec {
        exact_tol: exact_tol?,
        quadrature_tol: quadrature_tol?,
        sigma: sigma?,
        ratio_window: ratio_window.filter(|&w| w < 1.0)?,
        replicas: replicas.filter(|&r| r >= levysee::ou_solver::MIN_CHAR_ENSEMBLE)?,
        refinements: refinements.filter(|&r| r > 0)?,
        refinement_replicas: refinement_replicas.filter(|&r| r > 0)?,
    })
}

fn converge_section(ctx: &mut Ctx, mut s: Section, default_q: usize) -> Option<ConvergeSpec> {
    let indices = match s.opt("indices") {
        None => Some(vec![1, 2, 4, 8, 16]),
        Some(v) => array(ctx, "converge.indices", v, None, count),
    };
    if let Some(ix) = &indices {
        if ix.is_empty() || ix.contains(&0) || ix.windows(2).any(|w| w[0] >= w[1]) {
            ctx.err("converge.indices", "must be a nonempty strictly increasing list of positive integers");
        }
    }
    let q = s.usize_or(ctx, "q", default_q);
    let replicas = s.usize_or(ctx, "replicas", 2000);
    if replicas.is_some_and(|r| r < levysee::ou_solver::MIN_CHAR_ENSEMBLE) {
        ctx.err(
            "converge.replicas",
            format!("characteristic-function checks need at least {} replicas", levysee::ou_solver::MIN_CHAR_ENSEMBLE),
        );
    }
    let skorokhod_replicas = s.usize_or(ctx, "skorokhod_replicas", 4);
    let st_steps = s.usize_or(ctx, "st_steps", 4);
    if st_steps == Some(0) {
        ctx.err("converge.st_steps", "must be at least 1");
    }
    s.finish(ctx);
    Some(ConvergeSpec {
        indices: indices?,
        q: q?,
        replicas: replicas?,
        skorokhod_replicas: skorokhod_replicas?,
        st_steps: st_steps?,
    })
}

fn output_section(ctx: &mut Ctx, mut s: Section) -> Option<OutputSpec> {
    let dir = s.opt("dir").map_or(Some("out"), |v| string(ctx, "output.dir", v));
    let format = match s.opt("format") {
        None => Some(OutputFormat::Csv),
        Some(v) => string(ctx, "output.format", v).and_then(|f| {
            OutputFormat::parse(f).or_else(|| {
                ctx.err("output.format", format!("unknown format {f:?} (expected \"csv\" or \"json\")"));
                None
            })
        }),
    };
    s.finish(ctx);
    Some(OutputSpec { dir: PathBuf::from(dir?), format: format? })
}

/// Smallest eigenvalue of the symmetric part, or an asymmetry message.
fn psd_issue(q: &DMatrix<f64>) -> Option<String> {
    if q.iter().any(|x| !x.is_finite()) {
        return Some("entries must be finite".into());
    }
    let scale = q.amax().max(1.0);
    if (q - q.transpose()).amax() > 1e-12 * scale {
        return Some("matrix is not symmetric".into());
    }
    let min = SymmetricEigen::new(q.clone()).eigenvalues.min();
    (min < -1e-12 * scale).then(|| format!("not positive semidefinite (smallest eigenvalue {min:.6})"))
}

fn semantic_checks(ctx: &mut Ctx, cfg: &RunConfig) {
    let max_level = cfg.max_level();
    for (path, level) in [
        ("experiment.level", cfg.experiment.level),
        ("chars.rho_level", cfg.chars.rho_level),
        ("converge.q", cfg.converge.q),
    ] {
        if level > max_level {
            ctx.err(path, format!("level {level} exceeds the family's top level {max_level}"));
        }
    }
    if let Some(q) = &cfg.initial.covariance {
        if let Some(msg) = psd_issue(q) {
            ctx.err("initial.covariance", msg);
        }
    }
    let samples: Vec<f64> = (0..=8).map(|i| cfg.horizon() * i as f64 / 8.0).collect();
    let mut indices: Vec<Option<usize>> = vec![None];
    indices.extend(cfg.converge.indices.iter().map(|&n| Some(n)));
    if let Some(n) = cfg.experiment.index {
        indices.push(Some(n));
    }
    let before = ctx.issues.len();
    for n in indices {
        let nv = index_value(n);
        let at = describe_index(n);
        let c = &cfg.chars;
        for (i, a) in c.atoms.iter().enumerate() {
            let rate = a.rate.eval(&Vars::at_n(nv));
            if !(rate.is_finite() && rate > 0.0) {
                ctx.err_once(format!("chars.atoms[{i}].rate"), format!("rate must be positive and finite, got {rate} at {at}"));
            }
            let mark = eval_vec(&a.mark, nv);
            if mark.iter().any(|x| !x.is_finite()) || mark.iter().all(|&x| x == 0.0) {
                ctx.err_once(format!("chars.atoms[{i}].mark"), format!("mark must be finite and nonzero at {at}"));
            }
        }
        if eval_vec(&c.drift, nv).iter().any(|x| !x.is_finite()) {
            ctx.err_once("chars.drift", format!("entries must be finite at {at}"));
        }
        if let Some(msg) = psd_issue(&eval_matrix(&c.covariance, &Vars::at_n(nv))) {
            ctx.err_once("chars.covariance", format!("{msg} at {at}"));
        }
        let finite_on_grid = |rows: &[Vec<Expr>], f: &[f64]| {
            samples.iter().all(|&t| eval_matrix(rows, &Vars { t, k: 0.0, n: nv, f }).iter().all(|x| x.is_finite()))
        };
        match &cfg.evolution {
            EvolutionSpec::Identity => {}
            EvolutionSpec::Diagonal { eigenvalues } => {
                if eval_vec(eigenvalues, nv).iter().any(|x| !x.is_finite()) {
                    ctx.err_once("evolution.eigenvalues", format!("entries must be finite at {at}"));
                }
            }
            EvolutionSpec::DiagonalTimeDependent { rates, .. } => {
                let ok = samples.iter().all(|&t| rates.iter().all(|e| e.eval(&Vars { t, k: 0.0, n: nv, f: &[] }).is_finite()));
                if !ok {
                    ctx.err_once("evolution.rates", format!("rates must be finite on [0, T] at {at}"));
                }
            }
            EvolutionSpec::Matrix { matrix, .. } => {
                if !finite_on_grid(matrix, &[]) {
                    ctx.err_once("evolution.matrix", format!("entries must be finite on [0, T] at {at}"));
                }
            }
            EvolutionSpec::Perturbed { eigenvalues, perturbation, .. } => {
                if eval_vec(eigenvalues, nv).iter().any(|x| !x.is_finite()) {
                    ctx.err_once("evolution.eigenvalues", format!("entries must be finite at {at}"));
                }
                if !finite_on_grid(perturbation, &[]) {
                    ctx.err_once("evolution.perturbation", format!("entries must be finite on [0, T] at {at}"));
                }
            }
        }
        if let Some(rows) = &cfg.integrand {
            let mut marks: Vec<Vec<f64>> = vec![vec![0.0; cfg.dim()]];
            marks.extend(c.atoms.iter().map(|a| eval_vec(&a.mark, nv).as_slice().to_vec()));
            if !marks.iter().all(|f| finite_on_grid(rows, f)) {
                ctx.err_once("integrand.matrix", format!("entries must be finite on [0, T] at {at}"));
            }
        }
        if ctx.issues.len() == before {
            if let Err(e) = cfg.problem(n) {
                ctx.err_once("model", format!("problem construction failed at {at}: {e}"));
            }
        }
    }
}
