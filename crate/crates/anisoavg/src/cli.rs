//! Study configuration, the four experiment drivers, and report emission.
//!
//! A study is described by a strict INI-style config file: `[section]`
//! headers, `key = value` lines, `#`/`;` comments. Unknown keys are errors,
//! as are out-of-range values; defaults fill everything except the study
//! kind. Each driver writes `report.csv` (header
//! `experiment,parameter,metric,value,tolerance,pass`) plus its data files
//! into the output directory, flushing rows as they are produced so partial
//! results survive an abort. Identical configs produce bit-identical CSV.

use crate::averaging::{
    average_scalar, averaged_matrix_explicit, averaged_matrix_relaxation, HQProduct,
    MatrixFieldSample, OrbitFamily, WeightSpec,
};
use crate::corrector::{
    bump_battery, compute_corrector_frame, corrector_field, verify_decomposition,
    FrameFields,
};
use crate::expr::{self, Expr};
use crate::fields::{FlowMap, MatrixFieldSpec, VectorFieldSpec};
use crate::linalg;
use crate::solver::{
    diagnostics_bound_check, lumped_mass, solve_epsilon_problem, solve_limit_problem,
    step_explicit_cfl_demo, Grid2D, Scheme, SolverConfig,
};
use crate::{par, randfield, tol, Error, Result, Vector};
use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

pub const REPORT_HEADER: &str = "experiment,parameter,metric,value,tolerance,pass";

const USAGE: &str = "usage: anisoavg <config> [--out DIR] [--jobs N] [--seed S]\n\
    The ANISOAVG_OUT environment variable overrides --out.";

/// The four experiment drivers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudyKind {
    RotationReference,
    Convergence,
    CflDemo,
    CorrectorCheck,
}

impl StudyKind {
    pub fn parse(s: &str) -> Option<StudyKind> {
        match s {
            "rotation-reference" => Some(StudyKind::RotationReference),
            "convergence" => Some(StudyKind::Convergence),
            "cfl-demo" => Some(StudyKind::CflDemo),
            "corrector-check" => Some(StudyKind::CorrectorCheck),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            StudyKind::RotationReference => "rotation-reference",
            StudyKind::Convergence => "convergence",
            StudyKind::CflDemo => "cfl-demo",
            StudyKind::CorrectorCheck => "corrector-check",
        }
    }
}

/// Which weighted inner product the averaging uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightKind {
    Rotation,
    Identity,
}

impl WeightKind {
    pub fn build(&self) -> WeightSpec {
        match self {
            WeightKind::Rotation => WeightSpec::rotation(),
            WeightKind::Identity => WeightSpec::identity(),
        }
    }
}

/// Initial data: either a config expression or the built-in smoothly
/// windowed Gaussian ring supported on `0.3 < |y| < 2.7` (the default for
/// corrector studies, whose flux must vanish where the orbit family ends).
#[derive(Clone, Debug)]
pub enum InitialData {
    Expression(Expr),
    WindowedRing,
}

impl InitialData {
    pub fn eval(&self, y: &Vector) -> f64 {
        match self {
            InitialData::Expression(e) => e.eval(y),
            InitialData::WindowedRing => {
                let r = linalg::norm(y);
                (-((r - 1.5) / 0.55).powi(2)).exp() * randfield::bump01((r - 0.3) / 2.4)
            }
        }
    }
}

/// A fully validated study description.
#[derive(Clone, Debug)]
pub struct StudyConfig {
    pub kind: StudyKind,
    pub seed: u64,
    pub n: usize,
    pub l: f64,
    pub t_final: f64,
    pub dt: f64,
    pub scheme: Scheme,
    pub lin_tol: f64,
    pub eps_list: Vec<f64>,
    pub b: VectorFieldSpec,
    pub d: MatrixFieldSpec,
    pub weight: WeightKind,
    pub r_lo: f64,
    pub r_hi: f64,
    pub rings: usize,
    pub angles: usize,
    pub u_in: InitialData,
    pub v_in: Expr,
    pub out_dir: PathBuf,
}

impl StudyConfig {
    /// Documented defaults per study kind: n = 128, L = 4, Crank-Nicolson at
    /// dt = 2e-3, rotation flow, D = diag(2+cos|y|, 1). Kinds differ in
    /// scheme (the CFL demo is explicit), ε list, orbit family span, initial
    /// data, and final time: the convergence study stops at T = 0.1, while
    /// the state still carries the gradients the ε-comparison measures; the
    /// others run to T = 0.5.
    pub fn default_for(kind: StudyKind) -> StudyConfig {
        let (r_lo, r_hi, rings) = match kind {
            StudyKind::RotationReference => (0.5, 2.5, 24),
            StudyKind::CorrectorCheck => (0.25, 2.85, 96),
            _ => (0.05, 3.5, 70),
        };
        let eps_list = match kind {
            StudyKind::Convergence => vec![1e-1, 3e-2, 1e-2, 3e-3],
            StudyKind::CflDemo => vec![1e-2],
            _ => vec![1e-1],
        };
        let u_in = match kind {
            StudyKind::CorrectorCheck => InitialData::WindowedRing,
            _ => InitialData::Expression(
                expr::parse("exp(-2*|y|^2)").expect("default initial data parses"),
            ),
        };
        let scheme = match kind {
            StudyKind::CflDemo => Scheme::Explicit,
            _ => Scheme::CrankNicolson,
        };
        let t_final = match kind {
            StudyKind::Convergence => 0.1,
            _ => 0.5,
        };
        StudyConfig {
            kind,
            seed: 42,
            n: 128,
            l: 4.0,
            t_final,
            dt: 2e-3,
            scheme,
            lin_tol: tol::PCG_TOL,
            eps_list,
            b: VectorFieldSpec::rotation(),
            d: MatrixFieldSpec::diag(
                expr::parse("2+cos(|y|)").expect("default diffusion parses"),
                expr::parse("1").expect("default diffusion parses"),
            ),
            weight: WeightKind::Rotation,
            r_lo,
            r_hi,
            rings,
            angles: 256,
            u_in,
            v_in: expr::parse("0").expect("default layer datum parses"),
            out_dir: PathBuf::from("out"),
        }
    }

    /// Semantic validation shared by file parsing and direct construction.
    pub fn validate(&self) -> Result<()> {
        if self.n < 16 {
            return Err(Error::Config(format!(
                "grid.n must be at least 16, got {} (key `grid.n`)",
                self.n
            )));
        }
        if !(self.l > 0.0) {
            return Err(Error::Config("grid.l must be positive (key `grid.l`)".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("time.dt must be positive (key `time.dt`)".into()));
        }
        if self.t_final < self.dt {
            return Err(Error::Config(
                "time.t_final must cover at least one step (key `time.t_final`)".into(),
            ));
        }
        if !(self.lin_tol > 0.0 && self.lin_tol <= 1e-4) {
            return Err(Error::Config(
                "time.lin_tol must lie in (0, 1e-4] (key `time.lin_tol`)".into(),
            ));
        }
        if self.eps_list.is_empty() {
            return Err(Error::Config(
                "epsilon list must not be empty (key `epsilon.values`)".into(),
            ));
        }
        // ε = 0 means "uncorrected" and is meaningful only where no
        // ε-problem is solved.
        let zero_ok = self.kind == StudyKind::CorrectorCheck;
        for &e in &self.eps_list {
            let ok = e.is_finite() && e <= 1.0 && (e > 0.0 || (zero_ok && e == 0.0));
            if !ok {
                return Err(Error::Config(format!(
                    "epsilon {e} outside (0, 1] (key `epsilon.values`)"
                )));
            }
        }
        if self.kind == StudyKind::Convergence && self.eps_list.len() < 3 {
            return Err(Error::Config(
                "a convergence study needs at least 3 epsilon values (key `epsilon.values`)"
                    .into(),
            ));
        }
        if self.kind == StudyKind::CflDemo && self.scheme != Scheme::Explicit {
            return Err(Error::Config(
                "the CFL demo requires scheme = explicit (key `time.scheme`)".into(),
            ));
        }
        if !(self.r_lo > 0.0 && self.r_lo < self.r_hi) {
            return Err(Error::Config(
                "family radii must satisfy 0 < r_lo < r_hi (keys `family.r_lo`, `family.r_hi`)"
                    .into(),
            ));
        }
        if self.rings < 4 {
            return Err(Error::Config(
                "family.rings must be at least 4 (key `family.rings`)".into(),
            ));
        }
        if self.angles < 8 || self.angles % 2 != 0 {
            return Err(Error::Config(
                "family.angles must be even and at least 8 (key `family.angles`)".into(),
            ));
        }
        Ok(())
    }

    fn solver_config(&self, eps_list: Vec<f64>, scheme: Scheme) -> SolverConfig {
        SolverConfig {
            eps_list,
            dt: self.dt,
            t_final: self.t_final,
            lin_tol: self.lin_tol,
            scheme,
        }
    }
}

/// Raw `section.key -> (value, line)` map in file order of first appearance.
fn parse_ini(text: &str) -> Result<BTreeMap<(String, String), (String, usize)>> {
    let mut map = BTreeMap::new();
    let mut section = String::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        let lineno = lineno + 1;
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(inner) = line.strip_prefix('[') {
            let Some(name) = inner.strip_suffix(']') else {
                return Err(Error::Config(format!(
                    "line {lineno}: unterminated section header"
                )));
            };
            section = name.trim().to_string();
            if section.is_empty() {
                return Err(Error::Config(format!("line {lineno}: empty section name")));
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {lineno}: expected `key = value`, got `{line}`"
            )));
        };
        if section.is_empty() {
            return Err(Error::Config(format!(
                "line {lineno}: key before any [section] header"
            )));
        }
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if key.is_empty() {
            return Err(Error::Config(format!("line {lineno}: empty key")));
        }
        let id = (section.clone(), key);
        if let Some((_, first)) = map.get(&id) {
            return Err(Error::Config(format!(
                "line {lineno}: duplicate key `{}.{}` (first set on line {first})",
                id.0, id.1
            )));
        }
        map.insert(id, (value, lineno));
    }
    Ok(map)
}

const KNOWN_KEYS: &[(&str, &str)] = &[
    ("study", "kind"),
    ("study", "seed"),
    ("grid", "n"),
    ("grid", "l"),
    ("time", "t_final"),
    ("time", "dt"),
    ("time", "scheme"),
    ("time", "lin_tol"),
    ("epsilon", "values"),
    ("field.b", "b1"),
    ("field.b", "b2"),
    ("field.d", "d11"),
    ("field.d", "d12"),
    ("field.d", "d22"),
    ("weight", "kind"),
    ("family", "r_lo"),
    ("family", "r_hi"),
    ("family", "rings"),
    ("family", "angles"),
    ("initial", "u"),
    ("initial", "v"),
    ("output", "dir"),
];

struct RawConfig {
    map: BTreeMap<(String, String), (String, usize)>,
}

impl RawConfig {
    fn take(&mut self, section: &str, key: &str) -> Option<(String, usize)> {
        self.map.remove(&(section.to_string(), key.to_string()))
    }

    fn parse_with<T>(
        &mut self,
        section: &str,
        key: &str,
        f: impl Fn(&str) -> Option<T>,
        what: &str,
    ) -> Result<Option<T>> {
        match self.take(section, key) {
            None => Ok(None),
            Some((v, line)) => f(&v).map(Some).ok_or_else(|| {
                Error::Config(format!(
                    "line {line}: key `{section}.{key}`: `{v}` is not {what}"
                ))
            }),
        }
    }

    fn f64(&mut self, section: &str, key: &str) -> Result<Option<f64>> {
        self.parse_with(section, key, |v| v.parse::<f64>().ok(), "a number")
    }

    fn usize(&mut self, section: &str, key: &str) -> Result<Option<usize>> {
        self.parse_with(section, key, |v| v.parse::<usize>().ok(), "a nonnegative integer")
    }

    fn expr(&mut self, section: &str, key: &str) -> Result<Option<Expr>> {
        match self.take(section, key) {
            None => Ok(None),
            Some((v, line)) => expr::parse(&v).map(Some).map_err(|e| {
                Error::Config(format!("line {line}: key `{section}.{key}`: {e}"))
            }),
        }
    }
}

/// Reads and fully validates a study configuration. Unknown keys are
/// rejected with their line number; semantic errors name the offending key.
pub fn parse_config(path: &Path) -> Result<StudyConfig> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Config(format!("config file not found: {}", path.display()))
        } else {
            Error::Io(e)
        }
    })?;
    let map = parse_ini(&text)?;
    for ((section, key), (_, line)) in &map {
        if !KNOWN_KEYS.contains(&(section.as_str(), key.as_str())) {
            return Err(Error::Config(format!(
                "line {line}: unknown key `{section}.{key}`"
            )));
        }
    }
    let mut raw = RawConfig { map };

    let Some((kind_str, kind_line)) = raw.take("study", "kind") else {
        return Err(Error::Config("missing required key `study.kind`".into()));
    };
    let Some(kind) = StudyKind::parse(&kind_str) else {
        return Err(Error::Config(format!(
            "line {kind_line}: key `study.kind`: `{kind_str}` is not one of \
             rotation-reference|convergence|cfl-demo|corrector-check"
        )));
    };
    let mut cfg = StudyConfig::default_for(kind);

    if let Some(seed) =
        raw.parse_with("study", "seed", |v| v.parse::<u64>().ok(), "an unsigned integer")?
    {
        cfg.seed = seed;
    }
    if let Some(n) = raw.usize("grid", "n")? {
        cfg.n = n;
    }
    if let Some(l) = raw.f64("grid", "l")? {
        cfg.l = l;
    }
    if let Some(t) = raw.f64("time", "t_final")? {
        cfg.t_final = t;
    }
    if let Some(dt) = raw.f64("time", "dt")? {
        cfg.dt = dt;
    }
    if let Some(s) = raw.parse_with("time", "scheme", Scheme::parse,
        "one of backward-euler|crank-nicolson|explicit")?
    {
        cfg.scheme = s;
    }
    if let Some(t) = raw.f64("time", "lin_tol")? {
        cfg.lin_tol = t;
    }
    if let Some(eps) = raw.parse_with(
        "epsilon",
        "values",
        |v| {
            v.split(',')
                .map(|p| p.trim().parse::<f64>().ok())
                .collect::<Option<Vec<f64>>>()
                .filter(|l| !l.is_empty())
        },
        "a comma-separated list of numbers",
    )? {
        cfg.eps_list = eps;
    }
    let b1 = raw.expr("field.b", "b1")?;
    let b2 = raw.expr("field.b", "b2")?;
    match (b1, b2) {
        (None, None) => {}
        (Some(c1), Some(c2)) => {
            cfg.b = VectorFieldSpec::custom([c1, c2], true);
        }
        _ => {
            return Err(Error::Config(
                "keys `field.b.b1` and `field.b.b2` must be given together".into(),
            ));
        }
    }
    let d11 = raw.expr("field.d", "d11")?;
    let d12 = raw.expr("field.d", "d12")?;
    let d22 = raw.expr("field.d", "d22")?;
    match (d11, d22) {
        (None, None) => {
            if d12.is_some() {
                return Err(Error::Config(
                    "key `field.d.d12` needs `field.d.d11` and `field.d.d22`".into(),
                ));
            }
        }
        (Some(e11), Some(e22)) => {
            let e12 = d12.unwrap_or_else(|| Expr::constant(0.0));
            cfg.d = MatrixFieldSpec::from_entries(
                [[e11, e12.clone()], [e12, e22]],
                true,
                false,
            );
        }
        _ => {
            return Err(Error::Config(
                "keys `field.d.d11` and `field.d.d22` must be given together".into(),
            ));
        }
    }
    if let Some(w) = raw.parse_with(
        "weight",
        "kind",
        |v| match v {
            "rotation" => Some(WeightKind::Rotation),
            "identity" => Some(WeightKind::Identity),
            _ => None,
        },
        "one of rotation|identity",
    )? {
        cfg.weight = w;
    }
    if let Some(r) = raw.f64("family", "r_lo")? {
        cfg.r_lo = r;
    }
    if let Some(r) = raw.f64("family", "r_hi")? {
        cfg.r_hi = r;
    }
    if let Some(r) = raw.usize("family", "rings")? {
        cfg.rings = r;
    }
    if let Some(a) = raw.usize("family", "angles")? {
        cfg.angles = a;
    }
    if let Some(u) = raw.expr("initial", "u")? {
        cfg.u_in = InitialData::Expression(u);
    }
    if let Some(v) = raw.expr("initial", "v")? {
        cfg.v_in = v;
    }
    if let Some((dir, _)) = raw.take("output", "dir") {
        cfg.out_dir = PathBuf::from(dir);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// One line of the study report. `pass` always equals
/// `value.is_finite() && |value| <= tolerance`; informational rows carry an
/// infinite tolerance.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub experiment: &'static str,
    pub parameter: String,
    pub metric: &'static str,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl ReportRow {
    pub fn check(
        experiment: &'static str,
        parameter: impl Into<String>,
        metric: &'static str,
        value: f64,
        tolerance: f64,
    ) -> ReportRow {
        ReportRow {
            experiment,
            parameter: parameter.into(),
            metric,
            value,
            tolerance,
            pass: value.is_finite() && value.abs() <= tolerance,
        }
    }

    pub fn info(
        experiment: &'static str,
        parameter: impl Into<String>,
        metric: &'static str,
        value: f64,
    ) -> ReportRow {
        Self::check(experiment, parameter, metric, value, f64::INFINITY)
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{:.12e},{:.12e},{}",
            self.experiment, self.parameter, self.metric, self.value, self.tolerance, self.pass
        )
    }
}

/// Writes report rows as they arrive, flushing each line so partial results
/// survive an aborted study.
pub struct ReportSink {
    out: BufWriter<File>,
    rows: Vec<ReportRow>,
}

impl ReportSink {
    pub fn create(path: &Path) -> Result<ReportSink> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{REPORT_HEADER}")?;
        out.flush()?;
        Ok(ReportSink {
            out,
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, row: ReportRow) -> Result<()> {
        writeln!(self.out, "{}", row.csv_line())?;
        self.out.flush()?;
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[ReportRow] {
        &self.rows
    }

    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.pass).count()
    }
}

struct Prepared {
    grid: Grid2D,
    fm: FlowMap,
    family: OrbitFamily,
}

fn prepare(cfg: &StudyConfig) -> Result<Prepared> {
    let grid = Grid2D::new(cfg.n, cfg.l);
    let fm = FlowMap::new(cfg.b.clone(), tol::FLOW_TOL, cfg.l);
    let family = OrbitFamily::uniform(&fm, cfg.r_lo, cfg.r_hi, cfg.rings, cfg.angles)?;
    Ok(Prepared { grid, fm, family })
}

fn write_data_file(
    dir: &Path,
    name: &str,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(dir.join(name))?);
    f(&mut out)?;
    out.flush()?;
    Ok(())
}

/// Grid L² norm with the same lumped weights the solver diagnostics use.
fn weighted_l2(mass: &[f64], u: &[f64], v: &[f64]) -> f64 {
    mass.iter()
        .zip(u)
        .zip(v)
        .map(|((m, a), b)| m * (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Per-ring orbit means of the frame entries of `d`, against which the
/// averaged tensor's frame entries are compared (they must be the orbit
/// constants).
fn frame_identity_gap(
    d: &MatrixFieldSpec,
    davg: &MatrixFieldSample,
    frame: &FrameFields,
    family: &OrbitFamily,
) -> f64 {
    let na = family.n_angles;
    let mut worst: f64 = 0.0;
    for ring in 0..family.rings.len() {
        let mut means = [0.0; 3];
        for k in 0..na {
            let idx = family.index(ring, k);
            let dm = d.eval(family.node(ring, k));
            let (g0, g1) = (&frame.grad0[idx], &frame.grad1[idx]);
            means[0] += dm.quad(g0, g0);
            means[1] += dm.quad(g0, g1);
            means[2] += dm.quad(g1, g1);
        }
        for m in &mut means {
            *m /= na as f64;
        }
        for k in 0..na {
            let idx = family.index(ring, k);
            let am = &davg.values[idx];
            let (g0, g1) = (&frame.grad0[idx], &frame.grad1[idx]);
            let got = [am.quad(g0, g0), am.quad(g0, g1), am.quad(g1, g1)];
            for p in 0..3 {
                worst = worst.max((got[p] - means[p]).abs() / (1.0 + means[p].abs()));
            }
        }
    }
    worst
}

/// Entrywise gap to the rotation closed form `((λ₁+λ₂)/2)·I`, or `None`
/// when the configured diffusion is not a radial eigenvalue field (probed
/// numerically around each ring).
fn radial_closed_form_gap(
    d: &MatrixFieldSpec,
    davg: &MatrixFieldSample,
    family: &OrbitFamily,
) -> Option<f64> {
    for &r in &family.radii() {
        let base = d.eval(&[r, 0.0]);
        let scale = 1.0 + base.max_abs();
        for k in 0..16 {
            let th = 2.0 * std::f64::consts::PI * k as f64 / 16.0;
            let m = d.eval(&[r * th.cos(), r * th.sin()]);
            let radial = m.0[0][1].abs() <= 1e-12 * scale
                && (m.0[0][0] - base.0[0][0]).abs() <= 1e-12 * scale
                && (m.0[1][1] - base.0[1][1]).abs() <= 1e-12 * scale;
            if !radial {
                return None;
            }
        }
    }
    let na = family.n_angles;
    let mut worst: f64 = 0.0;
    for ring in 0..family.rings.len() {
        let r = family.rings[ring].radius;
        let base = d.eval(&[r, 0.0]);
        let half_trace = 0.5 * (base.0[0][0] + base.0[1][1]);
        for k in 0..na {
            let got = &davg.values[family.index(ring, k)];
            worst = worst
                .max((got.0[0][0] - half_trace).abs())
                .max((got.0[1][1] - half_trace).abs())
                .max(got.0[0][1].abs());
        }
    }
    Some(worst)
}

/// The reference experiment: averaged tensor by both routes, the closed
/// form where it applies, and the parametrization frame identities.
pub fn run_rotation_reference(cfg: &StudyConfig, sink: &mut ReportSink) -> Result<()> {
    let id = cfg.kind.as_str();
    let p = prepare(cfg)?;
    let w = cfg.weight.build();
    let explicit = averaged_matrix_explicit(&cfg.d, &w, &p.fm, &p.family)?;
    let d0 = MatrixFieldSample::from_spec(&p.family, &cfg.d);
    let relax = averaged_matrix_relaxation(
        &p.family,
        &d0,
        &w,
        &p.fm,
        4.5,
        1.8 * p.family.suggested_relaxation_dt(),
    )?;
    let hq = HQProduct::new(&p.family, &p.fm.field, &w);
    let agreement = hq.norm(&relax.sample.add_scaled(&explicit, -1.0)) / hq.norm(&explicit);
    sink.push(ReportRow::check(id, "-", "route_agreement_rel", agreement, 1e-6))?;
    let mono = relax
        .norms
        .windows(2)
        .map(|w| w[1] / w[0])
        .fold(0.0f64, f64::max);
    sink.push(ReportRow::check(id, "-", "relaxation_norm_ratio_max", mono, 1.0 + 1e-12))?;
    sink.push(ReportRow::info(id, "-", "relaxation_residual", relax.residual))?;
    sink.push(ReportRow::info(id, "-", "relaxation_steps", relax.steps as f64))?;
    if let Some(gap) = radial_closed_form_gap(&cfg.d, &explicit, &p.family) {
        sink.push(ReportRow::check(id, "-", "closed_form_gap", gap, 1e-10))?;
    }
    let frame = FrameFields::rotation(&p.family);
    frame.verify(&p.family, &cfg.b)?;
    let fid = frame_identity_gap(&cfg.d, &explicit, &frame, &p.family);
    sink.push(ReportRow::check(id, "-", "frame_identity_gap", fid, 1e-8))?;
    write_data_file(&cfg.out_dir, "averaged_explicit.dat", |out| {
        explicit.write_columnar(&p.family, &w.id, out)
    })?;
    write_data_file(&cfg.out_dir, "averaged_relaxation.dat", |out| {
        relax.sample.write_columnar(&p.family, &w.id, out)
    })?;
    Ok(())
}

/// The ε-study: errors against the averaged limit model and the uniform
/// constraint/energy estimates, one parameter point at a time.
pub fn run_convergence_study(cfg: &StudyConfig, sink: &mut ReportSink) -> Result<()> {
    let id = cfg.kind.as_str();
    let p = prepare(cfg)?;
    let w = cfg.weight.build();
    let mass = lumped_mass(&p.grid);
    let u_in = p.grid.sample(|y| cfg.u_in.eval(y));
    let davg = averaged_matrix_explicit(&cfg.d, &w, &p.fm, &p.family)?;
    // Initial data for the limit model is the orbit average of u_in.
    let u_avg_res: Vec<Result<f64>> = par::map_indexed(p.grid.n_nodes(), |idx| {
        let y = p.grid.point(idx % p.grid.n, idx / p.grid.n);
        average_scalar(|z| cfg.u_in.eval(z), &p.fm, &y)
    });
    let mut u_avg = Vec::with_capacity(u_avg_res.len());
    for v in u_avg_res {
        u_avg.push(v?);
    }
    let scfg = cfg.solver_config(cfg.eps_list.clone(), cfg.scheme);
    let limit = solve_limit_problem(&scfg, &p.grid, &davg, &p.family, &cfg.b, &u_avg)?;
    let zeros = vec![0.0; p.grid.n_nodes()];
    sink.push(ReportRow::info(
        id,
        "-",
        "limit_l2_final",
        weighted_l2(&mass, limit.final_state(), &zeros),
    ))?;
    let mut errs = Vec::new();
    for (i, &eps) in cfg.eps_list.iter().enumerate() {
        let param = format!("eps={eps:e}");
        let traj = solve_epsilon_problem(&scfg, &p.grid, &cfg.d, &cfg.b, eps, &u_in)?;
        let err = weighted_l2(&mass, traj.final_state(), limit.final_state());
        errs.push(err);
        sink.push(ReportRow::info(id, param.clone(), "l2_error", err))?;
        if eps < 1.0 {
            let bc = diagnostics_bound_check(&traj, eps, traj.steps[0].l2_norm);
            sink.push(ReportRow::check(
                id,
                param.clone(),
                "constraint_bound_ratio",
                bc.drift_norm / bc.drift_bound,
                tol::BOUND_SLACK,
            ))?;
            sink.push(ReportRow::check(
                id,
                param.clone(),
                "energy_bound_ratio",
                bc.grad_integral / bc.grad_bound,
                tol::BOUND_SLACK,
            ))?;
        }
        let mass_drift = traj
            .steps
            .iter()
            .map(|s| (s.mass - traj.steps[0].mass).abs())
            .fold(0.0, f64::max)
            / traj.steps[0].mass.abs().max(1e-300);
        sink.push(ReportRow::info(id, param.clone(), "mass_drift_rel", mass_drift))?;
        write_data_file(&cfg.out_dir, &format!("diagnostics_eps{i}.csv"), |out| {
            traj.write_diagnostics_csv(out)
        })?;
    }
    let ratio_max = errs
        .windows(2)
        .map(|e| e[1] / e[0])
        .fold(0.0f64, f64::max);
    sink.push(ReportRow::check(id, "-", "error_ratio_max", ratio_max, 1.0 - 1e-9))?;
    sink.push(ReportRow::check(
        id,
        "-",
        "error_final_over_first",
        errs[errs.len() - 1] / errs[0],
        0.2,
    ))?;
    Ok(())
}

/// The stiffness demonstration: the explicit scheme inside and outside its
/// stability bound, and backward Euler at the diverging step size.
pub fn run_cfl_demo(cfg: &StudyConfig, sink: &mut ReportSink) -> Result<()> {
    let id = cfg.kind.as_str();
    let p = prepare(cfg)?;
    let eps = cfg.eps_list[0];
    let param = format!("eps={eps:e}");
    let u_in = p.grid.sample(|y| cfg.u_in.eval(y));
    let scfg = cfg.solver_config(vec![eps], Scheme::Explicit);
    let stable = step_explicit_cfl_demo(&scfg, &p.grid, &cfg.d, &cfg.b, eps, &u_in, 0.5)?;
    let wild = step_explicit_cfl_demo(&scfg, &p.grid, &cfg.d, &cfg.b, eps, &u_in, 4.0)?;
    sink.push(ReportRow::info(id, param.clone(), "coeff_max_eig", stable.coeff_max_eig))?;
    sink.push(ReportRow::info(id, param.clone(), "dt_stable", stable.dt))?;
    sink.push(ReportRow::info(id, param.clone(), "dt_unstable", wild.dt))?;
    sink.push(ReportRow::check(
        id,
        param.clone(),
        "explicit_stable_norm_ratio",
        stable.max_norm_ratio,
        1.0 + 1e-9,
    ))?;
    sink.push(ReportRow::check(
        id,
        param.clone(),
        "explicit_divergence_margin",
        1e3 / wild.max_norm_ratio,
        1.0,
    ))?;
    // Backward Euler shrugs off the step size that blows the explicit
    // scheme up, on the same horizon.
    let be = SolverConfig {
        eps_list: vec![eps],
        dt: wild.dt,
        t_final: wild.dt * 200.0,
        lin_tol: cfg.lin_tol,
        scheme: Scheme::BackwardEuler,
    };
    let traj = solve_epsilon_problem(&be, &p.grid, &cfg.d, &cfg.b, eps, &u_in)?;
    sink.push(ReportRow::check(
        id,
        param,
        "implicit_norm_ratio",
        traj.final_diag().l2_norm / traj.steps[0].l2_norm,
        1.0,
    ))?;
    Ok(())
}

/// The corrector study: cell-problem normalization, the decomposition
/// residual battery, and the corrected initial condition
/// `u_in + ε(v_in + w_in)`.
pub fn run_corrector_check(cfg: &StudyConfig, sink: &mut ReportSink) -> Result<()> {
    let id = cfg.kind.as_str();
    let p = prepare(cfg)?;
    let w = cfg.weight.build();
    let davg = averaged_matrix_explicit(&cfg.d, &w, &p.fm, &p.family)?;
    let frame = FrameFields::rotation(&p.family);
    frame.verify(&p.family, &cfg.b)?;
    let cf = compute_corrector_frame(&cfg.d, &davg, &frame, &p.family)?;
    sink.push(ReportRow::check(
        id,
        "-",
        "frame_orbit_mean_max",
        cf.max_orbit_mean(&p.family),
        1e-8,
    ))?;
    let f_max = cf.f.values.iter().map(|m| m.max_abs()).fold(0.0, f64::max);
    sink.push(ReportRow::info(id, "-", "f_max_abs", f_max))?;
    sink.push(ReportRow::info(id, "-", "skipped_orbits", cf.skipped.len() as f64))?;
    for (k, (u, v)) in bump_battery().iter().enumerate() {
        let res = verify_decomposition(&cfg.d, &davg, &cf.f, &p.family, &cfg.b, u, v);
        sink.push(ReportRow::check(
            id,
            format!("pair={k}"),
            "decomposition_residual",
            res,
            1e-6,
        ))?;
    }
    write_data_file(&cfg.out_dir, "corrector_fields.dat", |out| {
        cf.write_columnar(&p.family, &w.id, out)
    })?;
    let eps = cfg.eps_list[0];
    let u_in = p.grid.sample(|y| cfg.u_in.eval(y));
    let v_in = p.grid.sample(|y| cfg.v_in.eval(y));
    let w_in = corrector_field(&cf, &p.family, &p.grid, &u_in)?;
    let corrected: Vec<f64> = u_in
        .iter()
        .zip(&v_in)
        .zip(&w_in)
        .map(|((u, v), w)| u + eps * (v + w))
        .collect();
    let shift = corrected
        .iter()
        .zip(&u_in)
        .map(|(c, u)| (c - u).abs())
        .fold(0.0, f64::max);
    sink.push(ReportRow::info(
        id,
        format!("eps={eps:e}"),
        "corrected_ic_shift_max",
        shift,
    ))?;
    write_data_file(&cfg.out_dir, "corrected_ic.dat", |out| {
        writeln!(out, "# eps={:.12e} columns=y1,y2,u", eps)?;
        for j in 0..p.grid.n {
            for i in 0..p.grid.n {
                let y = p.grid.point(i, j);
                writeln!(
                    out,
                    "{:.17e} {:.17e} {:.17e}",
                    y[0],
                    y[1],
                    corrected[p.grid.idx(i, j)]
                )?;
            }
        }
        Ok(())
    })?;
    Ok(())
}

/// Outcome of a completed study.
#[derive(Clone, Debug)]
pub struct StudySummary {
    pub rows: usize,
    pub failures: usize,
    pub report_path: PathBuf,
}

/// Runs the configured study, writing `report.csv` and the driver's data
/// files into the output directory. Rows produced before an error are
/// already on disk when the error propagates.
pub fn run_study(cfg: &StudyConfig) -> Result<StudySummary> {
    fs::create_dir_all(&cfg.out_dir)?;
    let report_path = cfg.out_dir.join("report.csv");
    let mut sink = ReportSink::create(&report_path)?;
    match cfg.kind {
        StudyKind::RotationReference => run_rotation_reference(cfg, &mut sink)?,
        StudyKind::Convergence => run_convergence_study(cfg, &mut sink)?,
        StudyKind::CflDemo => run_cfl_demo(cfg, &mut sink)?,
        StudyKind::CorrectorCheck => run_corrector_check(cfg, &mut sink)?,
    }
    Ok(StudySummary {
        rows: sink.rows().len(),
        failures: sink.failures(),
        report_path,
    })
}

struct CliArgs {
    config: PathBuf,
    out: Option<PathBuf>,
    jobs: Option<usize>,
    seed: Option<u64>,
}

fn parse_args(args: &[String]) -> std::result::Result<CliArgs, String> {
    let mut config = None;
    let mut out = None;
    let mut jobs = None;
    let mut seed = None;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let mut flag_value = |name: &str| {
            it.next()
                .cloned()
                .ok_or_else(|| format!("{name} needs a value"))
        };
        match a.as_str() {
            "--out" => out = Some(PathBuf::from(flag_value("--out")?)),
            "--jobs" => {
                let v = flag_value("--jobs")?;
                jobs = Some(
                    v.parse::<usize>()
                        .map_err(|_| format!("--jobs: `{v}` is not a thread count"))?,
                );
            }
            "--seed" => {
                let v = flag_value("--seed")?;
                seed = Some(
                    v.parse::<u64>()
                        .map_err(|_| format!("--seed: `{v}` is not an unsigned integer"))?,
                );
            }
            other if other.starts_with('-') => {
                return Err(format!("unknown flag `{other}`"));
            }
            other => {
                if config.replace(PathBuf::from(other)).is_some() {
                    return Err("more than one config path given".into());
                }
            }
        }
    }
    let config = config.ok_or_else(|| "missing config path".to_string())?;
    Ok(CliArgs {
        config,
        out,
        jobs,
        seed,
    })
}

/// Exit code used for usage, configuration, and runtime errors, distinct
/// from small failure counts.
pub const ERROR_EXIT: i32 = 120;

/// Full command-line entry point. The exit code is 0 when every report row
/// passes, the failure count (capped at 99) otherwise, and [`ERROR_EXIT`]
/// for errors that prevent a study from completing.
pub fn run_main(args: &[String]) -> i32 {
    let parsed = match parse_args(args) {
        Ok(p) => p,
        Err(msg) => {
            eprintln!("error: {msg}");
            eprintln!("{USAGE}");
            return ERROR_EXIT;
        }
    };
    if let Some(jobs) = parsed.jobs {
        par::configure_threads(jobs);
    }
    let mut cfg = match parse_config(&parsed.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ERROR_EXIT;
        }
    };
    if let Some(seed) = parsed.seed {
        cfg.seed = seed;
    }
    if let Ok(dir) = std::env::var("ANISOAVG_OUT") {
        cfg.out_dir = PathBuf::from(dir);
    } else if let Some(dir) = parsed.out {
        cfg.out_dir = dir;
    }
    match run_study(&cfg) {
        Ok(summary) => {
            println!(
                "{}: {} rows, {} failures -> {}",
                cfg.kind.as_str(),
                summary.rows,
                summary.failures,
                summary.report_path.display()
            );
            summary.failures.min(99) as i32
        }
        Err(e) => {
            eprintln!("error: {e}");
            ERROR_EXIT
        }
    }
}
