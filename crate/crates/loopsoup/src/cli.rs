//! Experiment runner: JSON configs, subcommand dispatch, deterministic
//! seeding, and manifest-first persistence.
//!
//! Every run writes `manifest.json` into the output directory before any
//! result file, and every result references the manifest by hash. The hash
//! covers the manifest as first written, with `wall_clock_seconds` still
//! null; the field is filled in place once the results are on disk, so a
//! checker recomputes the hash by nulling it. Result files are byte
//! identical for identical (config, seed) whatever the worker count.
//!
//! Fixed CSV columns per kind:
//!   theta            alpha,theta,stderr,replicas,epsilon_tail
//!   slab             width,lo,hi,resolved
//!   tail             radius,count,log_prob
//!   truncation-sweep cutoff,gap,stderr,replicas
//!   kappa-c          alpha,lo,hi,resolved
//! The other kinds write JSON (`alpha-c`, `multiscale`, `regular-ball`,
//! `oracle-validate`) or NDJSON loop dumps (`sample`).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::clusters::open_edges;
use crate::estimators::{
    find_threshold, kappa_c_curve, tail_fit, theta_n, theta_truncation_gaps, SoupMode,
    ThresholdModel,
};
use crate::lattice::{BoundaryMode, Cube, Cuboid, Point, Window};
use crate::loop_model::{Intensity, MassTable};
use crate::multiscale::{
    check_block_event, check_regular_ball, IsoMode, ScaleSequence, SiteGraph,
};
use crate::oracle;
use crate::sampler::{sample_truncated, sample_window};
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

fn default_version() -> u32 {
    CONFIG_VERSION
}

/// One experiment, fully described. Unknown keys are rejected so that a
/// typo cannot silently fall back to a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    #[serde(default)]
    pub kappa: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Length cutoffs for truncation-sweep, ascending.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoffs: Option<Vec<usize>>,
    /// Split length for the multiscale block event.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<i64>,
    /// "absorbing" (default) or "open"; open mode needs k_max.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundary: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k_max: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slab_width: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub widths: Option<Vec<i64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_replicas: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_star: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tol: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<i64>>,
    // Multiscale geometry.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub l0: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_scale: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub level: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub block_multiple: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_l: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta: Option<f64>,
    // Regular-ball parameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ball_radius: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_v: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub c_w: Option<f64>,
    /// "exact" or "bound".
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<i64>>,
}

pub const KINDS: [&str; 10] = [
    "sample",
    "theta",
    "alpha-c",
    "slab",
    "tail",
    "truncation-sweep",
    "kappa-c",
    "multiscale",
    "regular-ball",
    "oracle-validate",
];

/// Kinds that put a soup on the lattice and therefore need d >= 3 for the
/// open-mode tail bounds and the slab geometry to make sense.
fn needs_lattice(kind: &str) -> bool {
    kind != "oracle-validate"
}

impl ExperimentConfig {
    /// Grid of intensities: `alphas` if given, else the single `alpha`.
    fn alpha_grid(&self) -> Vec<f64> {
        match (&self.alphas, self.alpha) {
            (Some(v), _) => v.clone(),
            (None, Some(a)) => vec![a],
            (None, None) => Vec::new(),
        }
    }

    /// Validate every field in range and every per-kind requirement,
    /// reporting all violations at once.
    pub fn validate(&self) -> Result<()> {
        let mut bad: Vec<String> = Vec::new();
        if self.version != CONFIG_VERSION {
            bad.push(format!("version must be {CONFIG_VERSION}, got {}", self.version));
        }
        if !KINDS.contains(&self.kind.as_str()) {
            bad.push(format!("unknown kind {:?}", self.kind));
        }
        if !(self.kappa.is_finite() && self.kappa >= 0.0) {
            bad.push(format!("kappa must be finite and >= 0, got {}", self.kappa));
        }
        if needs_lattice(&self.kind) {
            match self.d {
                None => bad.push("d is required".into()),
                Some(d) if d < 3 => bad.push(format!("d must be >= 3, got {d}")),
                _ => {}
            }
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a >= 0.0) {
                bad.push(format!("alpha must be finite and >= 0, got {a}"));
            }
        }
        if let Some(grid) = &self.alphas {
            if grid.is_empty() {
                bad.push("alphas must be nonempty".into());
            }
            if grid.iter().any(|a| !(a.is_finite() && *a >= 0.0)) {
                bad.push("alphas must be finite and >= 0".into());
            }
            if grid.windows(2).any(|w| w[0] >= w[1]) {
                bad.push("alphas must be strictly increasing".into());
            }
        }
        if let Some(m) = self.m {
            if m < 2 || m % 2 != 0 {
                bad.push(format!("m must be even and >= 2, got {m}"));
            }
        }
        if let Some(k) = self.k_max {
            if k < 2 || k % 2 != 0 {
                bad.push(format!("k_max must be even and >= 2, got {k}"));
            }
        }
        if let Some(n) = self.n {
            if n < 1 {
                bad.push(format!("n must be >= 1, got {n}"));
            }
        }
        if let Some(r) = self.replicas {
            if r == 0 {
                bad.push("replicas must be >= 1".into());
            }
        }
        if let Some(b) = &self.boundary {
            if b != "absorbing" && b != "open" {
                bad.push(format!("boundary must be \"absorbing\" or \"open\", got {b:?}"));
            }
        }
        if let Some(t) = self.tol {
            if !(t > 0.0) {
                bad.push(format!("tol must be positive, got {t}"));
            }
        }
        if let Some(c) = self.c_star {
            if !(c > 0.0 && c < 1.0) {
                bad.push(format!("c_star must be in (0, 1), got {c}"));
            }
        }

        let mut need = |ok: bool, what: &str| {
            if !ok {
                bad.push(format!("kind {:?} requires {what}", self.kind));
            }
        };
        let open = self.boundary.as_deref() == Some("open");
        match self.kind.as_str() {
            "sample" => {
                need(self.n.is_some(), "n");
                need(self.alpha.is_some(), "alpha");
                need(self.seed.is_some(), "seed");
                if open {
                    need(self.k_max.is_some(), "k_max in open mode");
                } else {
                    need(self.m.is_some(), "m (or boundary \"open\" with k_max)");
                }
            }
            "theta" => {
                need(self.n.is_some(), "n");
                need(!self.alpha_grid().is_empty(), "alpha or alphas");
                need(self.replicas.is_some(), "replicas");
                need(self.seed.is_some(), "seed");
                if open {
                    need(self.k_max.is_some(), "k_max in open mode");
                } else {
                    need(self.m.is_some(), "m (or boundary \"open\" with k_max)");
                }
            }
            "alpha-c" => {
                need(self.n.is_some(), "n");
                need(self.m.is_some(), "m");
                need(self.replicas.is_some(), "replicas");
                need(self.seed.is_some(), "seed");
            }
            "slab" => {
                need(self.n.is_some(), "n");
                need(self.m.is_some(), "m");
                need(
                    self.slab_width.is_some() || self.widths.is_some(),
                    "slab_width or widths",
                );
                need(self.replicas.is_some(), "replicas");
                need(self.seed.is_some(), "seed");
            }
            "tail" => {
                need(self.alpha.is_some(), "alpha");
                need(self.m.is_some(), "m");
                need(self.radii.as_ref().is_some_and(|r| !r.is_empty()), "radii");
                need(self.replicas.is_some(), "replicas");
                need(self.seed.is_some(), "seed");
            }
            "truncation-sweep" => {
                need(self.alpha.is_some(), "alpha");
                need(self.n.is_some(), "n");
                need(self.cutoffs.as_ref().is_some_and(|c| !c.is_empty()), "cutoffs");
                need(self.replicas.is_some(), "replicas");
                need(self.seed.is_some(), "seed");
            }
            "kappa-c" => {
                need(!self.alpha_grid().is_empty(), "alpha or alphas");
                need(self.m.is_some(), "m");
                need(self.n.is_some(), "n");
                need(self.replicas.is_some(), "replicas");
                need(self.seed.is_some(), "seed");
            }
            "multiscale" => {
                need(self.alpha.is_some(), "alpha");
                need(self.m.is_some(), "m");
                need(self.cutoff.is_some(), "cutoff");
                need(self.l0.is_some(), "l0");
                need(self.r0.is_some(), "r0");
                need(self.base_scale.is_some(), "base_scale");
                need(self.level.is_some(), "level");
                need(self.block_multiple.is_some(), "block_multiple");
                need(self.theta_l.is_some(), "theta_l");
                need(self.theta.is_some(), "theta");
                need(self.seed.is_some(), "seed");
            }
            "regular-ball" => {
                need(self.alpha.is_some(), "alpha");
                need(self.m.is_some(), "m");
                need(self.n.is_some(), "n");
                need(self.ball_radius.is_some(), "ball_radius");
                need(self.c_v.is_some(), "c_v");
                need(self.c_p.is_some(), "c_p");
                need(self.c_w.is_some(), "c_w");
                need(
                    matches!(self.mode.as_deref(), Some("exact") | Some("bound")),
                    "mode \"exact\" or \"bound\"",
                );
                need(self.seed.is_some(), "seed");
            }
            "oracle-validate" => {}
            _ => {}
        }
        if let Some(c) = self.cutoff {
            if c < 2 || c % 2 != 0 {
                bad.push(format!("cutoff must be even and >= 2, got {c}"));
            }
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(bad.join("; ")))
        }
    }
}

/// Parse and validate a config from JSON text.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config syntax: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// What a run records about itself before any result exists.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub kind: String,
    pub config: ExperimentConfig,
    pub code_version: String,
    pub epsilon_tail: f64,
    /// How each replica's random stream is derived from the master seed.
    pub seed_streams: Vec<String>,
    pub outputs: Vec<String>,
    /// Null when the manifest is first written; filled in place after the
    /// results land. The manifest hash is taken over the null form.
    pub wall_clock_seconds: Option<f64>,
}

/// FNV-1a, 64-bit; stable and dependency-free. Used only to link result
/// files to the manifest they came from.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// One result file, rendered in memory before anything is persisted.
enum Rendered {
    /// CSV body (no manifest line yet) with fixed columns.
    Csv(String),
    /// JSON value, wrapped as {"manifest": ..., "result": ...} on write.
    Json(serde_json::Value),
    /// Raw bytes (NDJSON dumps); manifest hash goes in a leading comment.
    Ndjson(String),
}

pub struct RunOutcome {
    /// Inconsistency flags raised anywhere in the run; exit 1 when nonempty.
    pub flags: Vec<String>,
    pub files: Vec<PathBuf>,
}

fn to_json<T: Serialize>(value: &T) -> Result<serde_json::Value> {
    serde_json::to_value(value).map_err(Error::from)
}

/// Execute a validated config and persist results under `out_dir`.
///
/// Order of writes: manifest (wall clock null), then every result file
/// carrying the manifest hash, then the manifest again with the wall clock
/// filled. Rendering happens before the first write, so a crash mid-run
/// leaves either nothing or a manifest without results, never the reverse.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let mut flags: Vec<String> = Vec::new();
    let mut outputs: Vec<(String, Rendered)> = Vec::new();
    let mut epsilon_tail = 0.0f64;
    let mut seed_streams: Vec<String> = Vec::new();

    let seed = cfg.seed.unwrap_or(0);
    let replicas = cfg.replicas.unwrap_or(1);
    let kappa = cfg.kappa;
    let d = cfg.d.unwrap_or(3);
    let open = cfg.boundary.as_deref() == Some("open");

    match cfg.kind.as_str() {
        "sample" => {
            let n = cfg.n.unwrap();
            let alpha = cfg.alpha.unwrap();
            seed_streams.push(if open {
                "per replica r: stream(seed, [WINDOW, r])".into()
            } else {
                "per replica r: stream(seed, [TRUNCATED, r])".into()
            });
            for r in 0..replicas {
                let soup = if open {
                    let k_max = cfg.k_max.unwrap();
                    let window = Window::cube(d, n, BoundaryMode::OpenWithTailCutoff, kappa)?;
                    let base = Cube::around_origin(d, n).to_cuboid();
                    sample_window(&window, &base, alpha, k_max, seed, r as u64)?
                } else {
                    let m = cfg.m.unwrap();
                    let window = Window::cube(d, n, BoundaryMode::Absorbing, kappa)?;
                    let table = MassTable::build(&window, m)?;
                    let intensity = Intensity::truncated(alpha, kappa, m);
                    sample_truncated(&window, &table, &intensity, alpha, seed, r as u64)?
                };
                epsilon_tail = epsilon_tail.max(soup.epsilon_tail());
                let mut text = Vec::new();
                soup.dump_ndjson(&mut text)?;
                outputs.push((
                    format!("sample_{r:04}.ndjson"),
                    Rendered::Ndjson(String::from_utf8(text).expect("ndjson is utf8")),
                ));
            }
        }
        "theta" => {
            let n = cfg.n.unwrap();
            let grid = cfg.alpha_grid();
            let mode = if open {
                SoupMode::Window { k_max: cfg.k_max.unwrap() }
            } else {
                SoupMode::Truncated { m: cfg.m.unwrap() }
            };
            seed_streams.push("per replica r: stream(seed, [TRUNCATED | WINDOW, r])".into());
            let ests = theta_n(d, &grid, kappa, mode, n, replicas, seed)?;
            let mut csv = String::from("alpha,theta,stderr,replicas,epsilon_tail\n");
            for (a, e) in grid.iter().zip(&ests) {
                epsilon_tail = epsilon_tail.max(e.epsilon_tail);
                csv.push_str(&format!(
                    "{a},{},{},{},{}\n",
                    e.value, e.stderr, e.replicas, e.epsilon_tail
                ));
            }
            outputs.push(("theta.csv".into(), Rendered::Csv(csv)));
        }
        "alpha-c" => {
            let n = cfg.n.unwrap();
            let m = cfg.m.unwrap();
            let c_star = cfg.c_star.unwrap_or(0.5);
            let tol = cfg.tol.unwrap_or(0.1);
            let max_replicas = cfg.max_replicas.unwrap_or(replicas * 4);
            seed_streams
                .push("per probe p, replica r: stream(seed, [PROBE, p << 32 | r])".into());
            let bracket = find_threshold(
                d,
                &ThresholdModel::Bulk { m },
                kappa,
                n,
                c_star,
                tol,
                replicas,
                max_replicas,
                seed,
            )?;
            flags.extend(bracket.flags.iter().cloned());
            outputs.push(("alpha_c.json".into(), Rendered::Json(to_json(&bracket)?)));
        }
        "slab" => {
            let n = cfg.n.unwrap();
            let m = cfg.m.unwrap();
            let c_star = cfg.c_star.unwrap_or(0.5);
            let tol = cfg.tol.unwrap_or(0.1);
            let max_replicas = cfg.max_replicas.unwrap_or(replicas * 4);
            let widths = cfg
                .widths
                .clone()
                .unwrap_or_else(|| vec![cfg.slab_width.unwrap()]);
            seed_streams
                .push("per probe p, replica r: stream(seed, [PROBE, p << 32 | r])".into());
            let mut csv = String::from("width,lo,hi,resolved\n");
            let mut all = Vec::new();
            for &w in &widths {
                let bracket = find_threshold(
                    d,
                    &ThresholdModel::Slab { m, width: w },
                    kappa,
                    n,
                    c_star,
                    tol,
                    replicas,
                    max_replicas,
                    seed,
                )?;
                flags.extend(bracket.flags.iter().cloned());
                csv.push_str(&format!(
                    "{w},{},{},{}\n",
                    bracket.lo, bracket.hi, bracket.resolved
                ));
                all.push((w, bracket));
            }
            outputs.push(("slab.csv".into(), Rendered::Csv(csv)));
            outputs.push(("slab.json".into(), Rendered::Json(to_json(&all)?)));
        }
        "tail" => {
            let alpha = cfg.alpha.unwrap();
            let m = cfg.m.unwrap();
            let radii = cfg.radii.clone().unwrap();
            seed_streams.push("per replica r: stream(seed, [TRUNCATED, r])".into());
            let fit = tail_fit(d, alpha, kappa, m, &radii, replicas, seed)?;
            if fit.inconclusive {
                flags.push("tail fit inconclusive: too few usable radii".into());
            }
            let mut csv = String::from("radius,count,log_prob\n");
            for i in 0..fit.radii.len() {
                let lp = fit.log_probs[i]
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                csv.push_str(&format!("{},{},{lp}\n", fit.radii[i], fit.counts[i]));
            }
            outputs.push(("tail.csv".into(), Rendered::Csv(csv)));
            outputs.push(("tail.json".into(), Rendered::Json(to_json(&fit)?)));
        }
        "truncation-sweep" => {
            let alpha = cfg.alpha.unwrap();
            let n = cfg.n.unwrap();
            let cutoffs = cfg.cutoffs.clone().unwrap();
            seed_streams.push("per replica r: stream(seed, [TRUNCATED, r])".into());
            let gaps = theta_truncation_gaps(d, alpha, kappa, n, &cutoffs, replicas, seed)?;
            let mut csv = String::from("cutoff,gap,stderr,replicas\n");
            for (c, e) in &gaps {
                csv.push_str(&format!("{c},{},{},{}\n", e.value, e.stderr, e.replicas));
            }
            outputs.push(("truncation_sweep.csv".into(), Rendered::Csv(csv)));
        }
        "kappa-c" => {
            let n = cfg.n.unwrap();
            let m = cfg.m.unwrap();
            let c_star = cfg.c_star.unwrap_or(0.5);
            let tol = cfg.tol.unwrap_or(0.05);
            let max_replicas = cfg.max_replicas.unwrap_or(replicas * 4);
            let grid = cfg.alpha_grid();
            seed_streams
                .push("per probe p, replica r: stream(seed, [PROBE, p << 32 | r])".into());
            let curve =
                kappa_c_curve(d, &grid, m, n, c_star, tol, replicas, max_replicas, seed)?;
            let mut csv = String::from("alpha,lo,hi,resolved\n");
            for (a, bracket) in &curve {
                flags.extend(bracket.flags.iter().cloned());
                csv.push_str(&format!(
                    "{a},{},{},{}\n",
                    bracket.lo, bracket.hi, bracket.resolved
                ));
            }
            outputs.push(("kappa_c.csv".into(), Rendered::Csv(csv)));
            outputs.push(("kappa_c.json".into(), Rendered::Json(to_json(&curve)?)));
        }
        "multiscale" => {
            let alpha = cfg.alpha.unwrap();
            let m = cfg.m.unwrap();
            let cutoff = cfg.cutoff.unwrap();
            let scales =
                ScaleSequence::new(cfg.l0.unwrap(), cfg.r0.unwrap(), cfg.base_scale.unwrap())?;
            let level = cfg.level.unwrap();
            let k = cfg.block_multiple.unwrap();
            let ls = scales.big_l(level)?;
            // The block plus the classification collar plus half the
            // truncation length, so nothing is clipped silently.
            let collar = 2 * scales.big_l(0)? + (m as i64) / 2;
            let lo = vec![-2 * ls - collar; d];
            let hi = vec![(k + 2) * ls - 1 + collar; d];
            let domain = Cuboid::new(Point::new(&lo), Point::new(&hi))?;
            let window = Window::new(domain, BoundaryMode::Absorbing, kappa)?;
            let table = MassTable::build(&window, m)?;
            let intensity = Intensity::truncated(alpha, kappa, m);
            seed_streams.push("per replica r: stream(seed, [TRUNCATED, r])".into());
            let mut reports = Vec::new();
            for r in 0..replicas {
                let soup = sample_truncated(&window, &table, &intensity, alpha, seed, r as u64)?;
                let report = check_block_event(
                    &soup,
                    cutoff,
                    &scales,
                    k,
                    level,
                    cfg.theta_l.unwrap(),
                    cfg.theta.unwrap(),
                )?;
                reports.push(report);
            }
            outputs.push(("multiscale.json".into(), Rendered::Json(to_json(&reports)?)));
        }
        "regular-ball" => {
            let alpha = cfg.alpha.unwrap();
            let m = cfg.m.unwrap();
            let n = cfg.n.unwrap();
            let window = Window::cube(d, n, BoundaryMode::Absorbing, kappa)?;
            let table = MassTable::build(&window, m)?;
            let intensity = Intensity::truncated(alpha, kappa, m);
            seed_streams.push("replica 0: stream(seed, [TRUNCATED, 0])".into());
            let soup = sample_truncated(&window, &table, &intensity, alpha, seed, 0)?;
            let edges = open_edges(&soup, alpha)?;
            let graph = SiteGraph::from_open_window(&window, &edges);
            let center_point = cfg
                .center
                .as_ref()
                .map(|c| Point::new(c))
                .unwrap_or_else(|| Point::origin(d));
            let center = window.index(&center_point).ok_or_else(|| {
                Error::Geometry(format!("center {center_point} outside the window"))
            })?;
            let mode = match cfg.mode.as_deref() {
                Some("exact") => IsoMode::Exact,
                _ => IsoMode::Bound,
            };
            let report = check_regular_ball(
                &graph,
                d,
                center,
                cfg.ball_radius.unwrap(),
                cfg.c_v.unwrap(),
                cfg.c_p.unwrap(),
                cfg.c_w.unwrap(),
                mode,
            )?;
            outputs.push(("regular_ball.json".into(), Rendered::Json(to_json(&report)?)));
        }
        "oracle-validate" => {
            let golden: oracle::GoldenFile =
                serde_json::from_str(include_str!("../data/oracle_golden.json"))?;
            let (ran, mismatches) = oracle::validate_golden(&golden)?;
            for miss in &mismatches {
                flags.push(format!(
                    "oracle mismatch in {}: {} stored {} fresh {}",
                    miss.window, miss.what, miss.stored, miss.fresh
                ));
            }
            let body = serde_json::json!({
                "checks_ran": ran,
                "mismatches": to_json(&mismatches)?,
            });
            outputs.push(("oracle_validate.json".into(), Rendered::Json(body)));
        }
        other => return Err(Error::Config(format!("unknown kind {other:?}"))),
    }

    // Persist: manifest first, then results carrying its hash, then the
    // wall clock filled in.
    fs::create_dir_all(out_dir)?;
    let mut manifest = RunManifest {
        version: CONFIG_VERSION,
        kind: cfg.kind.clone(),
        config: cfg.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        epsilon_tail,
        seed_streams,
        outputs: outputs.iter().map(|(name, _)| name.clone()).collect(),
        wall_clock_seconds: None,
    };
    let manifest_path = out_dir.join("manifest.json");
    let core = serde_json::to_string_pretty(&manifest)?;
    fs::write(&manifest_path, &core)?;
    let hash = format!("{:016x}", fnv1a64(core.as_bytes()));

    let mut files = vec![manifest_path.clone()];
    for (name, rendered) in outputs {
        let path = out_dir.join(&name);
        match rendered {
            Rendered::Csv(body) => {
                fs::write(&path, format!("# manifest: {hash}\n{body}"))?;
            }
            Rendered::Json(value) => {
                let wrapped = serde_json::json!({ "manifest": hash, "result": value });
                fs::write(&path, serde_json::to_string_pretty(&wrapped)?)?;
            }
            Rendered::Ndjson(body) => {
                fs::write(&path, format!("# manifest: {hash}\n{body}"))?;
            }
        }
        files.push(path);
    }
    manifest.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    Ok(RunOutcome { flags, files })
}

/// Regenerate the oracle golden file into `out_dir` instead of validating.
pub fn regen_golden(out_dir: &Path) -> Result<PathBuf> {
    let golden = oracle::compute_golden()?;
    fs::create_dir_all(out_dir)?;
    let path = out_dir.join("oracle_golden.json");
    fs::write(&path, serde_json::to_string_pretty(&golden)?)?;
    Ok(path)
}

#[derive(Parser, Debug)]
#[command(name = "loopsoup", version, about = "Loop-soup percolation experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: CliCommand,
    /// JSON experiment config; required except for oracle-validate.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker thread count; results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Replica count override.
    #[arg(long, global = true)]
    pub replicas: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum CliCommand {
    Sample,
    Theta,
    AlphaC,
    Slab,
    Tail,
    TruncationSweep,
    KappaC,
    Multiscale,
    RegularBall,
    OracleValidate {
        /// Rewrite the golden file from fresh oracle runs instead of
        /// validating against it.
        #[arg(long)]
        regen: bool,
    },
}

impl CliCommand {
    pub fn kind(&self) -> &'static str {
        match self {
            CliCommand::Sample => "sample",
            CliCommand::Theta => "theta",
            CliCommand::AlphaC => "alpha-c",
            CliCommand::Slab => "slab",
            CliCommand::Tail => "tail",
            CliCommand::TruncationSweep => "truncation-sweep",
            CliCommand::KappaC => "kappa-c",
            CliCommand::Multiscale => "multiscale",
            CliCommand::RegularBall => "regular-ball",
            CliCommand::OracleValidate { .. } => "oracle-validate",
        }
    }
}

/// Exit codes: 0 clean, 1 completed with inconsistency flags, 2 errors.
pub fn main_with(cli: Cli) -> i32 {
    if let Some(w) = cli.workers {
        // First initialization wins; a later call in the same process is
        // fine to ignore since results never depend on thread count.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(w).build_global();
    }

    let kind = cli.command.kind();
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = match fs::read_to_string(path) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("error: cannot read {}: {e}", path.display());
                    return 2;
                }
            };
            match serde_json::from_str::<ExperimentConfig>(&text) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("error: config syntax: {e}");
                    return 2;
                }
            }
        }
        None if kind == "oracle-validate" => ExperimentConfig {
            version: CONFIG_VERSION,
            kind: kind.to_string(),
            d: None,
            kappa: 0.0,
            alpha: None,
            alphas: None,
            m: None,
            cutoffs: None,
            cutoff: None,
            n: None,
            boundary: None,
            k_max: None,
            slab_width: None,
            widths: None,
            replicas: None,
            max_replicas: None,
            seed: None,
            out: None,
            c_star: None,
            tol: None,
            radii: None,
            l0: None,
            r0: None,
            base_scale: None,
            level: None,
            block_multiple: None,
            theta_l: None,
            theta: None,
            ball_radius: None,
            c_v: None,
            c_p: None,
            c_w: None,
            mode: None,
            center: None,
        },
        None => {
            eprintln!("error: --config is required for {kind}");
            return 2;
        }
    };

    if cfg.kind != kind {
        eprintln!("error: config kind {:?} does not match subcommand {kind:?}", cfg.kind);
        return 2;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = Some(seed);
    }
    if let Some(replicas) = cli.replicas {
        cfg.replicas = Some(replicas);
    }
    // The output directory is not part of the experiment identity: it picks
    // where files land but never enters the config echo, so identical
    // (config, seed) hash identically wherever they are written.
    let out_dir = cli
        .out
        .clone()
        .or_else(|| cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));

    if let CliCommand::OracleValidate { regen: true } = cli.command {
        return match regen_golden(&out_dir) {
            Ok(path) => {
                println!("wrote {}", path.display());
                0
            }
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        };
    }

    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return 2;
    }
    match run(&cfg, &out_dir) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("wrote {}", f.display());
            }
            if outcome.flags.is_empty() {
                0
            } else {
                for flag in &outcome.flags {
                    eprintln!("flag: {flag}");
                }
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

pub fn main() -> i32 {
    main_with(Cli::parse())
}
