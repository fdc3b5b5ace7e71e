//! Loop-soup realizations.
//!
//! Two exact samplers live here. `sample_truncated` draws the length-cutoff
//! soup on an absorbing window: per even length a Poisson count against the
//! mass table, then each loop exactly by root-then-bridge. `sample_window`
//! draws every loop meeting a box under the free (open) boundary by rooting
//! loops at their visits and thinning the overcount away. Both attach
//! uniform arrival times so one realization carries the whole monotone
//! family of soups up to `alpha_max`.
//!
//! Neither sampler approximates within its length support; the only thing
//! missing from a realization is the mass of loops longer than the cutoff,
//! and that is reported as `epsilon_tail`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};

use crate::lattice::{BoundaryMode, Cuboid, Point, Window};
use crate::loop_model::{BallKernel, FreeWalkTable, Intensity, Loop, MassTable};
use crate::rng::{channel, stream};
use crate::{Error, Result};

/// One sampled soup: loops with arrival times, restrictable in alpha.
///
/// Entries are kept sorted by arrival, so restricting to a level is a prefix
/// and alpha sweeps can walk the entries once.
#[derive(Clone, Debug)]
pub struct SoupRealization {
    window: Window,
    entries: Vec<(f64, Loop)>,
    alpha_max: f64,
    epsilon_tail: f64,
    master_seed: u64,
    stream_tags: Vec<u64>,
}

impl SoupRealization {
    /// Assemble and validate a realization from raw entries. Samplers and
    /// the NDJSON loader both funnel through here.
    pub fn from_parts(
        window: Window,
        mut entries: Vec<(f64, Loop)>,
        alpha_max: f64,
        epsilon_tail: f64,
        master_seed: u64,
        stream_tags: Vec<u64>,
    ) -> Result<SoupRealization> {
        if !(alpha_max.is_finite() && alpha_max >= 0.0) {
            return Err(Error::Precondition(format!(
                "alpha_max must be finite and >= 0, got {alpha_max}"
            )));
        }
        if !(epsilon_tail.is_finite() && epsilon_tail >= 0.0) {
            return Err(Error::Precondition(format!(
                "epsilon_tail must be finite and >= 0, got {epsilon_tail}"
            )));
        }
        for (arrival, l) in &entries {
            if !(arrival.is_finite() && *arrival >= 0.0 && *arrival <= alpha_max) {
                return Err(Error::Precondition(format!(
                    "arrival {arrival} outside [0, {alpha_max}]"
                )));
            }
            if l.dim() != window.dim() {
                return Err(Error::Geometry(format!(
                    "loop dimension {} in a {}-dimensional window",
                    l.dim(),
                    window.dim()
                )));
            }
            if window.boundary() == BoundaryMode::Absorbing && !l.contained_in(window.domain()) {
                return Err(Error::Precondition(
                    "absorbing window holds a loop leaving the domain".into(),
                ));
            }
        }
        entries.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.len().cmp(&b.1.len())));
        Ok(SoupRealization {
            window,
            entries,
            alpha_max,
            epsilon_tail,
            master_seed,
            stream_tags,
        })
    }

    pub fn window(&self) -> &Window {
        &self.window
    }

    pub fn alpha_max(&self) -> f64 {
        self.alpha_max
    }

    /// Upper bound on the soup mass (per unit alpha times alpha_max) that the
    /// length cutoff left out of this realization.
    pub fn epsilon_tail(&self) -> f64 {
        self.epsilon_tail
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_tags(&self) -> &[u64] {
        &self.stream_tags
    }

    /// Entries sorted by arrival time.
    pub fn entries(&self) -> &[(f64, Loop)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries with arrival <= alpha; the prefix length of the
    /// level-alpha soup.
    pub fn count_at(&self, alpha: f64) -> usize {
        self.entries.partition_point(|(a, _)| *a <= alpha)
    }

    /// The loops present at level alpha, without copying.
    pub fn loops_at(&self, alpha: f64) -> impl Iterator<Item = &Loop> + '_ {
        self.entries[..self.count_at(alpha)].iter().map(|(_, l)| l)
    }

    /// The soup at a lower level: same realization, arrivals above alpha
    /// dropped. Deterministic, and monotone in alpha by construction.
    pub fn restrict(&self, alpha: f64) -> Result<SoupRealization> {
        if !(alpha >= 0.0) || alpha > self.alpha_max {
            return Err(Error::Precondition(format!(
                "restriction level {alpha} outside [0, {}]",
                self.alpha_max
            )));
        }
        let keep = self.count_at(alpha);
        // The missing tail mass is linear in the level.
        let scale = if self.alpha_max > 0.0 { alpha / self.alpha_max } else { 0.0 };
        Ok(SoupRealization {
            window: self.window.clone(),
            entries: self.entries[..keep].to_vec(),
            alpha_max: alpha,
            epsilon_tail: self.epsilon_tail * scale,
            master_seed: self.master_seed,
            stream_tags: self.stream_tags.clone(),
        })
    }

    /// Split into the loops of length <= l and the rest. The parts are
    /// independent soups; their union reconstructs this one.
    pub fn split_by_length(&self, l: usize) -> Result<(SoupRealization, SoupRealization)> {
        if l < 2 {
            return Err(Error::Precondition(format!("split length must be >= 2, got {l}")));
        }
        let (short, long): (Vec<_>, Vec<_>) =
            self.entries.iter().cloned().partition(|(_, lp)| lp.len() <= l);
        let make = |entries: Vec<(f64, Loop)>, eps: f64| SoupRealization {
            window: self.window.clone(),
            entries,
            alpha_max: self.alpha_max,
            epsilon_tail: eps,
            master_seed: self.master_seed,
            stream_tags: self.stream_tags.clone(),
        };
        // Whatever the cutoff hid is longer than it, hence in the long part.
        Ok((make(short, 0.0), make(long, self.epsilon_tail)))
    }

    /// One `{"arrival":..,"len":..,"pts":[[..],..]}` object per line.
    pub fn dump_ndjson(&self, mut out: impl Write) -> Result<()> {
        for (arrival, l) in &self.entries {
            let entry = NdjsonEntry {
                arrival: *arrival,
                len: l.len(),
                pts: l.points().iter().map(|p| p.coords().to_vec()).collect(),
            };
            serde_json::to_writer(&mut out, &entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct NdjsonEntry {
    arrival: f64,
    len: usize,
    pts: Vec<Vec<i64>>,
}

/// Parse an NDJSON loop dump back into entries, revalidating every loop.
/// Feed the result to `SoupRealization::from_parts` with the window and
/// level it was dumped from.
pub fn load_ndjson(input: impl BufRead) -> Result<Vec<(f64, Loop)>> {
    let mut entries = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: NdjsonEntry = serde_json::from_str(&line)?;
        if !(entry.arrival.is_finite() && entry.arrival >= 0.0) {
            return Err(Error::Precondition(format!(
                "line {}: bad arrival {}",
                lineno + 1,
                entry.arrival
            )));
        }
        let pts: Vec<Point> = entry.pts.iter().map(|c| Point::new(c)).collect();
        if pts.len() != entry.len {
            return Err(Error::Precondition(format!(
                "line {}: len field {} disagrees with {} points",
                lineno + 1,
                entry.len,
                pts.len()
            )));
        }
        // from_points re-checks evenness, adjacency, and closure.
        entries.push((entry.arrival, Loop::from_points(pts)?));
    }
    Ok(entries)
}

fn poisson_count(mean: f64, rng: &mut impl Rng) -> Result<u64> {
    if mean == 0.0 {
        return Ok(0);
    }
    if !(mean.is_finite() && mean > 0.0) {
        return Err(Error::Numerical(format!("bad Poisson mean {mean}")));
    }
    let dist = rand_distr::Poisson::new(mean)
        .map_err(|e| Error::Numerical(format!("Poisson({mean}): {e}")))?;
    Ok(dist.sample(rng) as u64)
}

/// Exact truncated soup on an absorbing window.
///
/// For each even length k up to the intensity's cutoff, the number of loops
/// is Poisson(alpha_max * beta_k * m_k). Each loop roots at a site drawn
/// proportional to the return kernel p_k(x,x), then unrolls as a bridge that
/// conditions every step on returning; interior roots (margin at least k/2)
/// take the free-walk shortcut, which agrees exactly there. Rooting this way
/// hits each unrooted class with probability proportional to its mass.
///
/// The intensity's `alpha` field is not read; arrivals are uniform on
/// [0, alpha_max] and callers restrict downward.
pub fn sample_truncated(
    window: &Window,
    table: &MassTable,
    intensity: &Intensity,
    alpha_max: f64,
    master_seed: u64,
    replica: u64,
) -> Result<SoupRealization> {
    sample_truncated_impl(
        window,
        table,
        intensity,
        alpha_max,
        master_seed,
        replica,
        &|k| k as u64,
    )
}

/// The worker behind `sample_truncated`, with the length-to-stream map
/// exposed so tests can permute streams between length classes.
pub(crate) fn sample_truncated_impl(
    window: &Window,
    table: &MassTable,
    intensity: &Intensity,
    alpha_max: f64,
    master_seed: u64,
    replica: u64,
    stream_of_len: &dyn Fn(usize) -> u64,
) -> Result<SoupRealization> {
    if window.boundary() != BoundaryMode::Absorbing {
        return Err(Error::Precondition(
            "truncated sampling needs an absorbing window; use sample_window for open mode".into(),
        ));
    }
    intensity.validate()?;
    if intensity.kappa != window.kappa() {
        return Err(Error::Precondition(format!(
            "intensity kappa {} vs window kappa {}",
            intensity.kappa,
            window.kappa()
        )));
    }
    if !(alpha_max.is_finite() && alpha_max >= 0.0) {
        return Err(Error::Precondition(format!("bad alpha_max {alpha_max}")));
    }
    let cutoff = intensity.cutoff.unwrap_or(table.k_max);
    if cutoff > table.k_max || !table.matches(window, table.k_max) {
        return Err(Error::Precondition(format!(
            "mass table covers lengths up to {} on its own window, need {cutoff} here",
            table.k_max
        )));
    }
    let d = window.dim();
    let free = FreeWalkTable::build(d, cutoff)?;
    let mut entries: Vec<(f64, Loop)> = Vec::new();
    for k in (2..=cutoff).step_by(2) {
        let mult = intensity.multiplier_for(k);
        let mean = alpha_max * mult * table.len_mass(k);
        let mut rng = stream(master_seed, &[channel::TRUNCATED, replica, stream_of_len(k)]);
        let count = poisson_count(mean, &mut rng)?;
        for _ in 0..count {
            let root_idx = table.sample_root(k, &mut rng);
            let root = window.site(root_idx);
            let pts = if window.margin_of_index(root_idx) >= (k / 2) as i64 {
                free.sample_walk(&root, k, &mut rng)
            } else {
                bridge_walk(window, &root, k, &mut rng)
            };
            let arrival = rng.random::<f64>() * alpha_max;
            let l = Loop::from_points(pts)?;
            // Region thinning is deterministic, so it stays Poisson.
            if intensity.admits(&l) {
                entries.push((arrival, l));
            }
        }
    }
    let epsilon_tail = alpha_max * table.tail_per_alpha;
    SoupRealization::from_parts(
        window.clone(),
        entries,
        alpha_max,
        epsilon_tail,
        master_seed,
        vec![channel::TRUNCATED, replica],
    )
}

/// Closed k-walk from a root near the boundary, one conditioned step at a
/// time: the step to y carries weight p_{k-j-1}(y, root) on the remaining
/// length, which the clipped-ball table holds exactly. The final step has
/// only the root left with positive weight, so the walk always closes.
fn bridge_walk(window: &Window, root: &Point, k: usize, rng: &mut impl Rng) -> Vec<Point> {
    let kernel = BallKernel::compute(window.domain(), None, root, (k / 2) as i64, k);
    let mut pts = Vec::with_capacity(k);
    let mut cur = root.clone();
    pts.push(cur.clone());
    for j in 0..k - 1 {
        let remaining = k - j - 1;
        let mut weights: Vec<(Point, f64)> = Vec::with_capacity(2 * window.dim());
        let mut total = 0.0;
        for y in cur.neighbors() {
            if !window.contains(&y) {
                continue;
            }
            if let Some(local) = kernel.local_index(&y) {
                let w = kernel.value(remaining, local);
                if w > 0.0 {
                    total += w;
                    weights.push((y, w));
                }
            }
        }
        debug_assert!(total > 0.0, "bridge ran out of continuations");
        let mut u = rng.random::<f64>() * total;
        let mut next = weights.last().expect("feasible step exists").0.clone();
        for (y, w) in &weights {
            u -= *w;
            if u <= 0.0 {
                next = y.clone();
                break;
            }
        }
        pts.push(next.clone());
        cur = next;
    }
    pts
}

/// Soup of all loops meeting `base_box`, lengths up to `k_max`, under the
/// open boundary.
///
/// Base-point decomposition: a Poisson cloud of (site, length, closed walk)
/// triples with per-site rate `sum_k (1+kappa)^{-k} p_k(0,0)` proposes each
/// loop class once per visit it makes to the box, and thinning by one over
/// the visit count restores the class mass exactly. Everything longer than
/// `k_max` is missing, and its mass is bounded by `epsilon_tail`.
pub fn sample_window(
    ambient: &Window,
    base_box: &Cuboid,
    alpha_max: f64,
    k_max: usize,
    master_seed: u64,
    replica: u64,
) -> Result<SoupRealization> {
    if ambient.boundary() != BoundaryMode::OpenWithTailCutoff {
        return Err(Error::Precondition(
            "window sampling is for the open boundary; use sample_truncated on absorbing windows"
                .into(),
        ));
    }
    if ambient.dim() < 3 {
        return Err(Error::Precondition("open-mode tail bounds need d >= 3".into()));
    }
    if k_max < 2 || k_max % 2 != 0 {
        return Err(Error::Precondition(format!("k_max must be even and >= 2, got {k_max}")));
    }
    if base_box.intersect(ambient.domain()).as_ref() != Some(base_box) {
        return Err(Error::Geometry("base box must sit inside the ambient domain".into()));
    }
    if !(alpha_max.is_finite() && alpha_max >= 0.0) {
        return Err(Error::Precondition(format!("bad alpha_max {alpha_max}")));
    }
    let d = ambient.dim();
    let kappa = ambient.kappa();
    let free = FreeWalkTable::build(d, k_max)?;
    let discount = 1.0 + kappa;
    // Cumulative per-length sequence rates: entry for k is
    // (1+kappa)^{-k} p_k(0,0), identical at every site by translation
    // invariance of the free kernel.
    let lengths: Vec<usize> = (2..=k_max).step_by(2).collect();
    let mut len_cdf = Vec::with_capacity(lengths.len());
    let mut site_rate = 0.0;
    for &k in &lengths {
        site_rate += discount.powi(-(k as i32)) * free.return_probability(k);
        len_cdf.push(site_rate);
    }
    let num_box_sites = base_box.num_sites() as f64;
    let box_sites = base_box.sites();
    let mut rng = stream(master_seed, &[channel::WINDOW, replica]);
    let proposals = poisson_count(alpha_max * site_rate * num_box_sites, &mut rng)?;
    let mut entries: Vec<(f64, Loop)> = Vec::new();
    for _ in 0..proposals {
        let root = box_sites[rng.random_range(0..box_sites.len())].clone();
        let u = rng.random::<f64>() * site_rate;
        let li = len_cdf.partition_point(|&c| c <= u).min(lengths.len() - 1);
        let k = lengths[li];
        let pts = free.sample_walk(&root, k, &mut rng);
        let arrival = rng.random::<f64>() * alpha_max;
        let l = Loop::from_points(pts)?;
        // The proposal hits a class once per time index it spends in the
        // box; keep each hit with the reciprocal probability.
        let visits = l.visits_in(base_box);
        debug_assert!(visits >= 1, "rooted in the box, so it visits the box");
        if visits == 1 || rng.random::<f64>() * visits as f64 <= 1.0 {
            entries.push((arrival, l));
        }
    }
    // Class mass of the dropped lengths: per root site, sum over k > k_max of
    // (1+kappa)^{-k} p_k / k, bounded through the plain rate tail.
    let epsilon_tail =
        alpha_max * num_box_sites * free.return_tail_bound(k_max, kappa) / (k_max as f64 + 2.0);
    SoupRealization::from_parts(
        ambient.clone(),
        entries,
        alpha_max,
        epsilon_tail,
        master_seed,
        vec![channel::WINDOW, replica],
    )
}

/// A Monte Carlo mass estimate with its own uncertainty bookkeeping.
#[derive(Clone, Copy, Debug)]
pub struct MassEstimate {
    pub value: f64,
    pub stderr: f64,
    pub replicas: u64,
    pub epsilon_tail: f64,
}

/// Estimate the mass of loop classes satisfying both predicates by counting
/// them in unit-intensity window soups. The count per replica is Poisson
/// with mean exactly the target mass (within the length cutoff), so the
/// average's standard error follows from the Poisson variance.
///
/// Both predicates must imply meeting `base_box`, otherwise the estimate
/// silently misses the loops rooted outside.
pub fn connection_mass_mc(
    ambient: &Window,
    base_box: &Cuboid,
    k_max: usize,
    replicas: u64,
    master_seed: u64,
    meets_a: impl Fn(&Loop) -> bool,
    meets_b: impl Fn(&Loop) -> bool,
) -> Result<MassEstimate> {
    if replicas == 0 {
        return Err(Error::Precondition("need at least one replica".into()));
    }
    let mut total: u64 = 0;
    let mut sq: f64 = 0.0;
    let mut epsilon_tail = 0.0;
    for r in 0..replicas {
        let soup = sample_window(ambient, base_box, 1.0, k_max, master_seed, r)?;
        let hits = soup
            .entries()
            .iter()
            .filter(|(_, l)| meets_a(l) && meets_b(l))
            .count() as u64;
        total += hits;
        sq += (hits * hits) as f64;
        epsilon_tail = soup.epsilon_tail();
    }
    let n = replicas as f64;
    let mean = total as f64 / n;
    // Sample variance; falls back to the Poisson variance when degenerate.
    let var = ((sq - n * mean * mean) / (n - 1.0).max(1.0)).max(0.0);
    Ok(MassEstimate {
        value: mean,
        stderr: (var / n).sqrt(),
        replicas,
        epsilon_tail,
    })
}
