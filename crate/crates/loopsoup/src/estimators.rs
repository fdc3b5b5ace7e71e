//! Monte Carlo experiments over soups: theta curves, threshold bisection,
//! exponential tail fits, truncation convergence, and the kappa threshold
//! curve. Everything here reduces to sampling realizations, reading cluster
//! events off them, and aggregating with honest error bars.
//!
//! All sweeps over alpha or over the length cutoff reuse one realization per
//! replica, so monotone events are monotone replica by replica, not merely
//! in expectation.

use crate::clusters::{
    build_clusters, finite_cluster_extent, one_arm, open_edges, OpenEdgeSet, UnionFind,
};
use crate::lattice::{BoundaryMode, Cube, Cuboid, Point, Window};
use crate::loop_model::{Intensity, MassTable};
use crate::rng::{channel, stream};
use crate::sampler::{sample_truncated, sample_window, SoupRealization};
use crate::{Error, Result};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Two-sided 95% normal quantile, used for every CI-aware decision here.
pub const Z95: f64 = 1.959963984540054;

/// A Monte Carlo estimate with its provenance.
#[derive(Clone, Debug, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub replicas: usize,
    pub seed: u64,
    pub epsilon_tail: f64,
}

impl Estimate {
    pub fn from_samples(samples: &[f64], seed: u64, epsilon_tail: f64) -> Result<Estimate> {
        let n = samples.len();
        if n < 2 {
            return Err(Error::Precondition(format!(
                "an estimate needs at least 2 replicas, got {n}"
            )));
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        Ok(Estimate {
            value: mean,
            stderr: (var / n as f64).sqrt(),
            replicas: n,
            seed,
            epsilon_tail,
        })
    }

    /// Estimate of an event probability from a success count.
    pub fn from_bernoulli(hits: usize, replicas: usize, seed: u64, epsilon_tail: f64) -> Result<Estimate> {
        if replicas < 2 {
            return Err(Error::Precondition(format!(
                "an estimate needs at least 2 replicas, got {replicas}"
            )));
        }
        let p = hits as f64 / replicas as f64;
        Ok(Estimate {
            value: p,
            stderr: (p * (1.0 - p) / (replicas as f64 - 1.0)).sqrt(),
            replicas,
            seed,
            epsilon_tail,
        })
    }

    pub fn ci_half_width(&self) -> f64 {
        Z95 * self.stderr
    }
}

/// Ordinary least squares fit of y against x.
#[derive(Clone, Debug, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

pub fn ols_line(xs: &[f64], ys: &[f64]) -> Result<LineFit> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(Error::Precondition(format!(
            "fit needs matched samples, at least 2: got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::Precondition("all x values coincide".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let r_squared = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    Ok(LineFit { slope, intercept, r_squared })
}

/// Upper tail of the chi-square distribution, for independence tests.
pub fn chi_square_p_value(statistic: f64, dof: f64) -> Result<f64> {
    let dist = ChiSquared::new(dof)
        .map_err(|e| Error::Precondition(format!("chi-square dof {dof}: {e}")))?;
    Ok(1.0 - dist.cdf(statistic))
}

/// How replicas are generated for theta estimates.
#[derive(Clone, Copy, Debug)]
pub enum SoupMode {
    /// Length-truncated soup on an absorbing window sized by the margin rule.
    Truncated { m: usize },
    /// Loops meeting the observation ball, any shape up to `k_max`, sampled
    /// through the free-walk proposal. Carries a nonzero tail bound.
    Window { k_max: usize },
}

impl SoupMode {
    fn cutoff(&self) -> usize {
        match *self {
            SoupMode::Truncated { m } => m,
            SoupMode::Window { k_max } => k_max,
        }
    }
}

fn require_even_cutoff(m: usize) -> Result<()> {
    if m < 2 || m % 2 != 0 {
        return Err(Error::Precondition(format!(
            "length cutoff must be even and at least 2, got {m}"
        )));
    }
    Ok(())
}

/// Replica tag combining a probe index with a replica index, so every probe
/// of every experiment draws from its own stream.
fn replica_tag(probe: u64, r: u64) -> u64 {
    debug_assert!(r < 1 << 32);
    (probe << 32) | r
}

/// One-arm probabilities over an alpha grid, one coupled realization per
/// replica. The grid must be strictly increasing; each realization is drawn
/// at the top level and swept upward through its arrival times, so the
/// estimates are non-decreasing along the grid replica by replica.
pub fn theta_n(
    d: usize,
    alphas: &[f64],
    kappa: f64,
    mode: SoupMode,
    n: i64,
    replicas: usize,
    seed: u64,
) -> Result<Vec<Estimate>> {
    if alphas.is_empty() || !alphas.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Precondition("alpha grid must be strictly increasing".into()));
    }
    if !(alphas[0] >= 0.0) || !alphas.iter().all(|a| a.is_finite()) {
        return Err(Error::Precondition("alpha grid must be finite and nonnegative".into()));
    }
    if n < 1 {
        return Err(Error::Precondition(format!("arm radius must be >= 1, got {n}")));
    }
    require_even_cutoff(mode.cutoff())?;
    let alpha_max = *alphas.last().unwrap();
    let radius = n + (mode.cutoff() / 2) as i64;

    let (window, table) = match mode {
        SoupMode::Truncated { m } => {
            let w = Window::cube(d, radius, BoundaryMode::Absorbing, kappa)?;
            let t = MassTable::build(&w, m)?;
            (w, Some(t))
        }
        SoupMode::Window { .. } => {
            (Window::cube(d, radius, BoundaryMode::OpenWithTailCutoff, kappa)?, None)
        }
    };
    let origin_idx = window.index(&Point::origin(d)).expect("cube windows hold the origin");
    let shell: Vec<usize> = (0..window.num_sites())
        .filter(|&i| window.site(i).sup_norm() >= n)
        .collect();
    let base = Cube::around_origin(d, n).to_cuboid();

    let per_replica: Vec<(Vec<bool>, f64)> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<(Vec<bool>, f64)> {
            let s = match mode {
                SoupMode::Truncated { m } => {
                    let intensity = Intensity::truncated(alpha_max, kappa, m);
                    sample_truncated(&window, table.as_ref().unwrap(), &intensity, alpha_max, seed, r)?
                }
                SoupMode::Window { k_max } => {
                    sample_window(&window, &base, alpha_max, k_max, seed, r)?
                }
            };
            Ok((arm_profile(&window, &s, alphas, origin_idx, &shell), s.epsilon_tail()))
        })
        .collect::<Result<Vec<_>>>()?;

    let eps_max = per_replica.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    alphas
        .iter()
        .enumerate()
        .map(|(g, &a)| {
            let hits = per_replica.iter().filter(|(arms, _)| arms[g]).count();
            let eps = if alpha_max > 0.0 { eps_max * a / alpha_max } else { 0.0 };
            Estimate::from_bernoulli(hits, replicas, seed, eps)
        })
        .collect()
}

/// Sweep one realization's arrivals upward, reporting the one-arm indicator
/// at each grid point. Union-find only ever merges, which is exactly the
/// monotone coupling.
fn arm_profile(
    window: &Window,
    s: &SoupRealization,
    alphas: &[f64],
    origin_idx: usize,
    shell: &[usize],
) -> Vec<bool> {
    let v = window.num_sites();
    let mut uf = UnionFind::new(v + 1);
    for &i in shell {
        uf.union(i, v);
    }
    let entries = s.entries();
    let mut ptr = 0;
    let mut out = Vec::with_capacity(alphas.len());
    for &a in alphas {
        while ptr < entries.len() && entries[ptr].0 <= a {
            for (x, y) in entries[ptr].1.edges() {
                if let (Some(ix), Some(iy)) = (window.index(x), window.index(y)) {
                    uf.union(ix, iy);
                }
            }
            ptr += 1;
        }
        out.push(uf.connected(origin_idx, v));
    }
    out
}

/// Independent-edge reference model: every window edge open with the same
/// probability, nothing else. The m = 2 soup reduces to this exactly, which
/// makes it the natural cross-check harness.
pub fn bernoulli_edges(window: &Window, p: f64, master_seed: u64, replica: u64) -> Result<OpenEdgeSet> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Precondition(format!("edge probability {p} outside [0, 1]")));
    }
    let mut rng = stream(master_seed, &[channel::BERNOULLI, replica]);
    let mut set = OpenEdgeSet::empty(window, p, master_seed);
    for slot in 0..window.num_edge_slots() {
        if window.edge_endpoints(slot).is_some() && rng.random::<f64>() < p {
            set.set(slot);
        }
    }
    Ok(set)
}

/// Crossing along axis 0 between the two faces of `region`, using only open
/// edges with both endpoints inside the region.
pub fn box_crossing(window: &Window, edges: &OpenEdgeSet, region: &Cuboid) -> Result<bool> {
    if window.domain().intersect(region) != Some(region.clone()) {
        return Err(Error::Precondition("crossing region must lie inside the window".into()));
    }
    let n = window.num_sites();
    let (lo_v, hi_v) = (n, n + 1);
    let mut uf = UnionFind::new(n + 2);
    let lo = region.lo().coord(0);
    let hi = region.hi().coord(0);
    for i in 0..n {
        let p = window.site(i);
        if region.contains(&p) {
            if p.coord(0) == lo {
                uf.union(i, lo_v);
            }
            if p.coord(0) == hi {
                uf.union(i, hi_v);
            }
        }
    }
    for slot in edges.iter_open() {
        let (a, b) = window.edge_endpoints(slot).expect("open slots address real edges");
        if region.contains(&window.site(a)) && region.contains(&window.site(b)) {
            uf.union(a, b);
        }
    }
    Ok(uf.connected(lo_v, hi_v))
}

/// What percolates in a threshold search.
#[derive(Clone, Debug)]
pub enum ThresholdModel {
    /// Length-truncated soup in a box with the margin-rule collar.
    Bulk { m: usize },
    /// Length-truncated soup confined to a slab of the given width.
    Slab { m: usize, width: i64 },
    /// Independent edges; the level is the edge probability.
    Bernoulli,
}

/// A bisection bracket around a percolation threshold.
#[derive(Clone, Debug, Serialize)]
pub struct ThresholdBracket {
    pub lo: f64,
    pub hi: f64,
    pub c_star: f64,
    pub scale: i64,
    pub prob_lo: Option<Estimate>,
    pub prob_hi: Option<Estimate>,
    /// False when the replica budget ran out with a probe CI still straddling
    /// the target; the bracket is then returned wide rather than narrowed on
    /// noise.
    pub resolved: bool,
    pub flags: Vec<String>,
}

struct ProbeGeometry {
    window: Window,
    region: Cuboid,
    table: Option<MassTable>,
}

fn build_geometry(d: usize, model: &ThresholdModel, kappa: f64, n: i64) -> Result<ProbeGeometry> {
    if n < 1 {
        return Err(Error::Precondition(format!("crossing scale must be >= 1, got {n}")));
    }
    match *model {
        ThresholdModel::Bulk { m } => {
            require_even_cutoff(m)?;
            let h = (m / 2) as i64;
            let domain = Cuboid::new(Point::new(&vec![-h; d]), Point::new(&vec![n + h; d]))?;
            let region = Cuboid::new(Point::new(&vec![0; d]), Point::new(&vec![n; d]))?;
            let window = Window::new(domain, BoundaryMode::Absorbing, kappa)?;
            let table = MassTable::build(&window, m)?;
            Ok(ProbeGeometry { window, region, table: Some(table) })
        }
        ThresholdModel::Slab { m, width } => {
            require_even_cutoff(m)?;
            let window = Window::slab(d, n, width, kappa)?;
            let region = window.domain().clone();
            let table = MassTable::build(&window, m)?;
            Ok(ProbeGeometry { window, region, table: Some(table) })
        }
        ThresholdModel::Bernoulli => {
            let domain = Cuboid::new(Point::new(&vec![0; d]), Point::new(&vec![n; d]))?;
            let window = Window::new(domain, BoundaryMode::Absorbing, 0.0)?;
            let region = window.domain().clone();
            Ok(ProbeGeometry { window, region, table: None })
        }
    }
}

/// Crossing successes out of `replicas` fresh realizations at one level.
fn crossing_hits(
    geo: &ProbeGeometry,
    model: &ThresholdModel,
    kappa: f64,
    level: f64,
    replicas: usize,
    probe: u64,
    master_seed: u64,
) -> Result<usize> {
    let flags: Vec<bool> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<bool> {
            let tag = replica_tag(probe, r);
            let edges = match *model {
                ThresholdModel::Bernoulli => bernoulli_edges(&geo.window, level, master_seed, tag)?,
                ThresholdModel::Bulk { m } | ThresholdModel::Slab { m, .. } => {
                    let intensity = Intensity::truncated(level, kappa, m);
                    let s = sample_truncated(
                        &geo.window,
                        geo.table.as_ref().unwrap(),
                        &intensity,
                        level,
                        master_seed,
                        tag,
                    )?;
                    open_edges(&s, level)?
                }
            };
            box_crossing(&geo.window, &edges, &geo.region)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(flags.into_iter().filter(|&b| b).count())
}

enum Decision {
    Above(Estimate),
    Below(Estimate),
    Undecided(Estimate),
}

struct Bisection<'a> {
    c_star: f64,
    r0: usize,
    r_max: usize,
    seed: u64,
    probe_counter: u64,
    history: Vec<(f64, Estimate)>,
    probe: Box<dyn FnMut(f64, usize, u64) -> Result<usize> + 'a>,
}

impl<'a> Bisection<'a> {
    /// Pool fresh replicas at one level, doubling until the CI clears the
    /// target or the budget runs out.
    fn decide(&mut self, level: f64) -> Result<Decision> {
        let mut hits = 0usize;
        let mut total = 0usize;
        let mut batch = self.r0;
        loop {
            hits += (self.probe)(level, batch, self.probe_counter)?;
            total += batch;
            self.probe_counter += 1;
            let est = Estimate::from_bernoulli(hits, total, self.seed, 0.0)?;
            let half = est.ci_half_width();
            let verdict = if est.value - half > self.c_star {
                Some(Decision::Above(est.clone()))
            } else if est.value + half < self.c_star {
                Some(Decision::Below(est.clone()))
            } else if total >= self.r_max {
                Some(Decision::Undecided(est.clone()))
            } else {
                None
            };
            if let Some(v) = verdict {
                self.history.push((level, est));
                return Ok(v);
            }
            batch = total.min(self.r_max - total);
        }
    }

    /// Probe estimates should be monotone in the level up to noise; flag any
    /// pair that disagrees beyond three joint standard errors.
    fn monotonicity_flags(&self, increasing: bool) -> Vec<String> {
        let mut flags = Vec::new();
        for i in 0..self.history.len() {
            for j in 0..self.history.len() {
                let (li, ei) = &self.history[i];
                let (lj, ej) = &self.history[j];
                if li >= lj {
                    continue;
                }
                let gap = if increasing { ei.value - ej.value } else { ej.value - ei.value };
                if gap > 3.0 * (ei.stderr + ej.stderr) {
                    flags.push(format!(
                        "non-monotone probes beyond noise: p({li:.4}) = {:.4}, p({lj:.4}) = {:.4}",
                        ei.value, ej.value
                    ));
                }
            }
        }
        flags
    }
}

/// CI-aware bisection for the level at which the crossing probability passes
/// `c_star`. `increasing` says whether the probability grows with the level
/// (alpha, p) or shrinks (kappa). `lo` must sit on the small-probability side
/// for increasing searches and on the large side for decreasing ones; when
/// `zero_collapse` is set, a decreasing search whose origin already fails the
/// criterion reports the [0, tol] bracket instead of erroring.
#[allow(clippy::too_many_arguments)]
fn bisect_threshold(
    mut bis: Bisection<'_>,
    increasing: bool,
    lo0: f64,
    lo_certain: bool,
    hi_seed: f64,
    hi_cap: Option<f64>,
    zero_collapse: bool,
    tol: f64,
    scale: i64,
) -> Result<ThresholdBracket> {
    let mut flags: Vec<String> = Vec::new();
    let mut lo = lo0;
    let mut prob_lo: Option<Estimate> = None;
    let mut prob_hi: Option<Estimate> = None;

    if !lo_certain {
        match bis.decide(lo)? {
            Decision::Above(e) if !increasing => prob_lo = Some(e),
            Decision::Below(e) if increasing => prob_lo = Some(e),
            Decision::Undecided(e) => {
                flags.push(format!("undecided at the bracket origin {lo}"));
                flags.extend(bis.monotonicity_flags(increasing));
                return Ok(ThresholdBracket {
                    lo,
                    hi: hi_seed,
                    c_star: bis.c_star,
                    scale,
                    prob_lo: Some(e),
                    prob_hi: None,
                    resolved: false,
                    flags,
                });
            }
            Decision::Above(e) | Decision::Below(e) => {
                // The wrong side of the criterion at the origin.
                if zero_collapse {
                    // The estimate at the origin documents the collapse; no
                    // flag, since nothing inconsistent happened.
                    return Ok(ThresholdBracket {
                        lo: 0.0,
                        hi: tol,
                        c_star: bis.c_star,
                        scale,
                        prob_lo: Some(e),
                        prob_hi: None,
                        resolved: true,
                        flags,
                    });
                }
                return Err(Error::Precondition(format!(
                    "bracket origin {lo} is on the wrong side of c* = {}",
                    bis.c_star
                )));
            }
        }
    }

    // Grow the far end until the criterion flips.
    let mut hi = hi_seed;
    let mut doublings = 0;
    loop {
        if doublings > 24 {
            flags.push(format!("no sign change found up to level {hi}"));
            flags.extend(bis.monotonicity_flags(increasing));
            return Ok(ThresholdBracket {
                lo,
                hi,
                c_star: bis.c_star,
                scale,
                prob_lo,
                prob_hi,
                resolved: false,
                flags,
            });
        }
        match bis.decide(hi)? {
            Decision::Above(e) if increasing => {
                prob_hi = Some(e);
                break;
            }
            Decision::Below(e) if !increasing => {
                prob_hi = Some(e);
                break;
            }
            Decision::Above(e) | Decision::Below(e) => {
                lo = hi;
                prob_lo = Some(e);
            }
            Decision::Undecided(e) => {
                flags.push(format!("undecided at level {hi} after {} replicas", e.replicas));
                flags.extend(bis.monotonicity_flags(increasing));
                return Ok(ThresholdBracket {
                    lo,
                    hi,
                    c_star: bis.c_star,
                    scale,
                    prob_lo,
                    prob_hi: Some(e),
                    resolved: false,
                    flags,
                });
            }
        }
        let next = match hi_cap {
            Some(cap) if hi >= cap => {
                flags.push(format!("criterion never flips up to the cap {cap}"));
                flags.extend(bis.monotonicity_flags(increasing));
                return Ok(ThresholdBracket {
                    lo,
                    hi: cap,
                    c_star: bis.c_star,
                    scale,
                    prob_lo,
                    prob_hi,
                    resolved: false,
                    flags,
                });
            }
            Some(cap) => (hi * 2.0).min(cap),
            None => hi * 2.0,
        };
        hi = next;
        doublings += 1;
    }

    let mut resolved = true;
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        match bis.decide(mid)? {
            Decision::Above(e) => {
                if increasing {
                    hi = mid;
                    prob_hi = Some(e);
                } else {
                    lo = mid;
                    prob_lo = Some(e);
                }
            }
            Decision::Below(e) => {
                if increasing {
                    lo = mid;
                    prob_lo = Some(e);
                } else {
                    hi = mid;
                    prob_hi = Some(e);
                }
            }
            Decision::Undecided(e) => {
                flags.push(format!(
                    "undecided at level {mid:.6} after {} replicas; bracket left wide",
                    e.replicas
                ));
                resolved = false;
                break;
            }
        }
    }
    flags.extend(bis.monotonicity_flags(increasing));
    Ok(ThresholdBracket {
        lo,
        hi,
        c_star: bis.c_star,
        scale,
        prob_lo,
        prob_hi,
        resolved,
        flags,
    })
}

/// Bracket the percolation threshold of `model` at crossing scale `n`.
///
/// The level being bisected is the intensity for the soup models and the
/// edge probability for the Bernoulli reference. Probes draw fresh replicas,
/// doubling up to `max_replicas` whenever the probe CI straddles `c_star`.
#[allow(clippy::too_many_arguments)]
pub fn find_threshold(
    d: usize,
    model: &ThresholdModel,
    kappa: f64,
    n: i64,
    c_star: f64,
    tol: f64,
    replicas: usize,
    max_replicas: usize,
    seed: u64,
) -> Result<ThresholdBracket> {
    if !(0.0 < c_star && c_star < 1.0) {
        return Err(Error::Precondition(format!("c* must lie in (0, 1), got {c_star}")));
    }
    if !(tol > 0.0) {
        return Err(Error::Precondition(format!("tolerance must be positive, got {tol}")));
    }
    if replicas < 2 || max_replicas < replicas {
        return Err(Error::Precondition(
            "need replicas >= 2 and max_replicas >= replicas".into(),
        ));
    }
    let geo = build_geometry(d, model, kappa, n)?;
    let (hi_seed, hi_cap) = match model {
        ThresholdModel::Bernoulli => (0.4, Some(1.0)),
        _ => (4.0, None),
    };
    let bis = Bisection {
        c_star,
        r0: replicas,
        r_max: max_replicas,
        seed,
        probe_counter: 0,
        history: Vec::new(),
        probe: Box::new(move |level, r, probe| {
            crossing_hits(&geo, model, kappa, level, r, probe, seed)
        }),
    };
    // At level zero nothing is open, so the origin side is certain.
    bisect_threshold(bis, true, 0.0, true, hi_seed, hi_cap, false, tol, n)
}

/// Threshold in kappa at each fixed alpha: the level past which killing
/// suppresses the crossing. Subcritical alphas report a zero bracket.
#[allow(clippy::too_many_arguments)]
pub fn kappa_c_curve(
    d: usize,
    alphas: &[f64],
    m: usize,
    n: i64,
    c_star: f64,
    tol: f64,
    replicas: usize,
    max_replicas: usize,
    seed: u64,
) -> Result<Vec<(f64, ThresholdBracket)>> {
    require_even_cutoff(m)?;
    let mut out = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        if !(alpha > 0.0) {
            return Err(Error::Precondition(format!("alpha must be positive, got {alpha}")));
        }
        let model = ThresholdModel::Bulk { m };
        let bis = Bisection {
            c_star,
            r0: replicas,
            r_max: max_replicas,
            seed,
            probe_counter: 0,
            history: Vec::new(),
            probe: Box::new(move |kappa, r, probe| {
                let geo = build_geometry(d, &model, kappa, n)?;
                crossing_hits(&geo, &model, kappa, alpha, r, probe, seed)
            }),
        };
        let bracket = bisect_threshold(bis, false, 0.0, false, 1.0, None, true, tol, n)?;
        out.push((alpha, bracket));
    }
    Ok(out)
}

/// Exponential tail fit for P[cluster of the origin is finite in the window
/// and reaches the shell of B(n)].
#[derive(Clone, Debug, Serialize)]
pub struct TailFit {
    pub radii: Vec<i64>,
    /// ln of the per-radius success frequency; None where no replica hit.
    pub log_probs: Vec<Option<f64>>,
    pub counts: Vec<usize>,
    pub replicas: usize,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    /// Set when fewer than 5 radii carry at least 10 successes; the fit, if
    /// any, is then reported for inspection rather than inference.
    pub inconclusive: bool,
    pub notes: Vec<String>,
}

/// Minimum successes for a radius to enter the least-squares fit, and the
/// number of usable radii below which the fit is flagged.
const FIT_MIN_SUCCESSES: usize = 10;
const FIT_MIN_RADII: usize = 5;

#[allow(clippy::too_many_arguments)]
pub fn tail_fit(
    d: usize,
    alpha: f64,
    kappa: f64,
    m: usize,
    radii: &[i64],
    replicas: usize,
    seed: u64,
) -> Result<TailFit> {
    require_even_cutoff(m)?;
    if radii.is_empty() || !radii.windows(2).all(|w| w[0] < w[1]) || radii[0] < 1 {
        return Err(Error::Precondition("radii must be strictly increasing, starting >= 1".into()));
    }
    let n_max = *radii.last().unwrap();
    let radius = n_max + (m / 2) as i64;
    let window = Window::cube(d, radius, BoundaryMode::Absorbing, kappa)?;
    let table = MassTable::build(&window, m)?;
    let origin = Point::origin(d);

    let per_replica: Vec<Vec<bool>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<bool>> {
            let intensity = Intensity::truncated(alpha, kappa, m);
            let s = sample_truncated(&window, &table, &intensity, alpha, seed, r)?;
            let edges = open_edges(&s, alpha)?;
            let f = build_clusters(&window, &edges);
            let (_, reach, censored) = finite_cluster_extent(&f, &origin)?;
            Ok(radii.iter().map(|&n| !censored && reach >= n).collect())
        })
        .collect::<Result<Vec<_>>>()?;

    let counts: Vec<usize> = (0..radii.len())
        .map(|i| per_replica.iter().filter(|v| v[i]).count())
        .collect();
    let log_probs: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| (c as f64 / replicas as f64).ln()))
        .collect();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (i, &c) in counts.iter().enumerate() {
        if c >= FIT_MIN_SUCCESSES {
            xs.push(radii[i] as f64);
            ys.push(log_probs[i].unwrap());
        }
    }
    let mut notes = Vec::new();
    let inconclusive = xs.len() < FIT_MIN_RADII;
    if inconclusive {
        notes.push(format!(
            "{} of {} radii reached {} successes; need {}",
            xs.len(),
            radii.len(),
            FIT_MIN_SUCCESSES,
            FIT_MIN_RADII
        ));
    }
    let fit = if xs.len() >= 2 { Some(ols_line(&xs, &ys)?) } else { None };
    Ok(TailFit {
        radii: radii.to_vec(),
        log_probs,
        counts,
        replicas,
        slope: fit.as_ref().map(|f| f.slope),
        intercept: fit.as_ref().map(|f| f.intercept),
        r_squared: fit.as_ref().map(|f| f.r_squared),
        inconclusive,
        notes,
    })
}

/// Per-cutoff gap |theta_hat^(L) - theta_hat| on shared realizations. The
/// full soup is the one truncated at the largest requested cutoff; each
/// smaller L keeps only the loops of length <= L from the very same
/// realization, so the gap is a per-replica indicator and non-increasing
/// in L sample by sample.
#[allow(clippy::too_many_arguments)]
pub fn theta_truncation_gaps(
    d: usize,
    alpha: f64,
    kappa: f64,
    n: i64,
    cutoffs: &[usize],
    replicas: usize,
    seed: u64,
) -> Result<Vec<(usize, Estimate)>> {
    if cutoffs.is_empty() || !cutoffs.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Precondition("cutoffs must be strictly increasing".into()));
    }
    for &l in cutoffs {
        require_even_cutoff(l)?;
    }
    let k = *cutoffs.last().unwrap();
    let radius = n + (k / 2) as i64;
    let window = Window::cube(d, radius, BoundaryMode::Absorbing, kappa)?;
    let table = MassTable::build(&window, k)?;

    let per_replica: Vec<Vec<bool>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<bool>> {
            let intensity = Intensity::truncated(alpha, kappa, k);
            let s = sample_truncated(&window, &table, &intensity, alpha, seed, r)?;
            let full_edges = open_edges(&s, alpha)?;
            let full_arm = {
                let f = build_clusters(&window, &full_edges);
                one_arm(&f, n, k)?
            };
            let mut gaps = Vec::with_capacity(cutoffs.len());
            let mut prev_arm = false;
            for &l in cutoffs {
                let (short, _) = s.split_by_length(l)?;
                let edges = open_edges(&short, alpha)?;
                let f = build_clusters(&window, &edges);
                let arm = one_arm(&f, n, k)?;
                debug_assert!(arm || !prev_arm, "arms are monotone in the cutoff");
                debug_assert!(full_arm || !arm, "truncation only removes loops");
                prev_arm = arm;
                gaps.push(full_arm && !arm);
            }
            let _ = prev_arm;
            Ok(gaps)
        })
        .collect::<Result<Vec<_>>>()?;

    cutoffs
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let hits = per_replica.iter().filter(|v| v[i]).count();
            Ok((l, Estimate::from_bernoulli(hits, replicas, seed, 0.0)?))
        })
        .collect()
}

/// Mean size of the origin's cluster over replicas where it stayed clear of
/// the window boundary; returns the estimate plus the censored count.
#[allow(clippy::too_many_arguments)]
pub fn mean_finite_cluster(
    d: usize,
    alpha: f64,
    kappa: f64,
    m: usize,
    radius: i64,
    replicas: usize,
    seed: u64,
) -> Result<(Estimate, usize)> {
    require_even_cutoff(m)?;
    let window = Window::cube(d, radius, BoundaryMode::Absorbing, kappa)?;
    let table = MassTable::build(&window, m)?;
    let origin = Point::origin(d);
    let outcomes: Vec<Option<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<Option<f64>> {
            let intensity = Intensity::truncated(alpha, kappa, m);
            let s = sample_truncated(&window, &table, &intensity, alpha, seed, r)?;
            let edges = open_edges(&s, alpha)?;
            let f = build_clusters(&window, &edges);
            let (size, _, censored) = finite_cluster_extent(&f, &origin)?;
            Ok((!censored).then_some(size as f64))
        })
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<f64> = outcomes.iter().flatten().copied().collect();
    let censored = replicas - sizes.len();
    if sizes.len() < 2 {
        return Err(Error::Precondition(format!(
            "only {} uncensored replicas out of {replicas}; window too small for this alpha",
            sizes.len()
        )));
    }
    Ok((Estimate::from_samples(&sizes, seed, 0.0)?, censored))
}

/// P[B(n) connects to the window's boundary shell], per requested n. The
/// shell stands in for infinity, which is the usual finite-volume proxy.
#[allow(clippy::too_many_arguments)]
pub fn big_box_connect(
    d: usize,
    alpha: f64,
    kappa: f64,
    m: usize,
    radius: i64,
    ns: &[i64],
    replicas: usize,
    seed: u64,
) -> Result<Vec<(i64, Estimate)>> {
    require_even_cutoff(m)?;
    if ns.is_empty() || !ns.windows(2).all(|w| w[0] < w[1]) || ns[0] < 0 {
        return Err(Error::Precondition("box sizes must be strictly increasing and >= 0".into()));
    }
    let n_max = *ns.last().unwrap();
    if radius < n_max + (m / 2) as i64 {
        return Err(Error::Margin { needed: n_max + (m / 2) as i64, have: radius });
    }
    let window = Window::cube(d, radius, BoundaryMode::Absorbing, kappa)?;
    let table = MassTable::build(&window, m)?;
    let boxes: Vec<Vec<usize>> = ns
        .iter()
        .map(|&n| {
            Cube::around_origin(d, n)
                .sites()
                .iter()
                .map(|p| window.index(p).expect("boxes fit in the window"))
                .collect()
        })
        .collect();

    let per_replica: Vec<Vec<bool>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| -> Result<Vec<bool>> {
            let intensity = Intensity::truncated(alpha, kappa, m);
            let s = sample_truncated(&window, &table, &intensity, alpha, seed, r)?;
            let edges = open_edges(&s, alpha)?;
            let f = build_clusters(&window, &edges);
            let mut shell_label = vec![false; window.num_sites()];
            for i in window.boundary_shell() {
                shell_label[f.label(i)] = true;
            }
            let mut hit = false;
            let flags = boxes
                .iter()
                .map(|sites| {
                    hit = hit || sites.iter().any(|&i| shell_label[f.label(i)]);
                    hit
                })
                .collect();
            Ok(flags)
        })
        .collect::<Result<Vec<_>>>()?;

    ns.iter()
        .enumerate()
        .map(|(i, &n)| {
            let hits = per_replica.iter().filter(|v| v[i]).count();
            Ok((n, Estimate::from_bernoulli(hits, replicas, seed, 0.0)?))
        })
        .collect()
}
