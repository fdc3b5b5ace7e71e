//! Exact ground truth on tiny windows.
//!
//! Everything in this module is small and dense. A window holds at most a
//! dozen sites, so the loop mass reduces to a log-determinant of the
//! site-restricted walk kernel, the joint law of the open edges fits in one
//! table indexed by bitmask, and connectivity probabilities come out exact.
//! The Monte Carlo layers are tested against these numbers, never the other
//! way around.
//!
//! The one identity everything rests on: the total mass of loops confined to
//! a finite site set with kernel `Q` is `-log det(I - Q/(1+kappa))`. It is
//! validated internally two independent ways (truncated trace series with an
//! analytic remainder, and explicit loop enumeration) before being trusted as
//! a reference.

use std::collections::HashSet;
use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::lattice::{Cuboid, Point};
use crate::loop_model::Loop;
use crate::{Error, Result};

/// Site cap for exact windows. Dense factorizations stay trivial here.
pub const MAX_ORACLE_SITES: usize = 12;

/// Edge cap for the joint edge-state law (2^16 patterns).
pub const MAX_ORACLE_EDGES: usize = 16;

/// Half-length cap for the pivotal-sum derivative (exhaustive enumeration).
pub const MAX_PIVOTAL_HALF_LEN: usize = 4;

/// Central-difference step for derivative checks, Richardson-extrapolated.
const FD_STEP: f64 = 1e-5;

/// Below this magnitude a derivative is treated as exactly zero when forming
/// ratios. Central differences on values of order one carry roundoff around
/// 1e-11; this sits well under any real signal we compare.
const DERIV_ZERO: f64 = 1e-13;

/// A finite set of lattice sites carrying the restricted walk kernel.
///
/// Sites may form any shape, not just a box. Edges are the nearest-neighbor
/// pairs inside the set; the kernel puts `1/(2d)` on each of them and is
/// absorbing outside, so its spectral radius is strictly below one for any
/// proper subset of the lattice.
#[derive(Clone, Debug)]
pub struct TinyWindow {
    sites: Vec<Point>,
    edges: Vec<(usize, usize)>,
    kappa: f64,
    dim: usize,
}

impl TinyWindow {
    pub fn from_sites(sites: Vec<Point>, kappa: f64) -> Result<TinyWindow> {
        if sites.is_empty() {
            return Err(Error::Precondition("oracle window needs sites".into()));
        }
        if sites.len() > MAX_ORACLE_SITES {
            return Err(Error::Precondition(format!(
                "oracle window holds {} sites, cap is {}",
                sites.len(),
                MAX_ORACLE_SITES
            )));
        }
        if !(kappa.is_finite() && kappa >= 0.0) {
            return Err(Error::Precondition(format!("kappa must be finite and >= 0, got {kappa}")));
        }
        let dim = sites[0].dim();
        if dim < 1 {
            return Err(Error::Geometry("zero-dimensional site".into()));
        }
        for p in &sites {
            if p.dim() != dim {
                return Err(Error::Geometry("mixed dimensions in site list".into()));
            }
        }
        for i in 0..sites.len() {
            for j in i + 1..sites.len() {
                if sites[i] == sites[j] {
                    return Err(Error::Geometry(format!("duplicate site {}", sites[i])));
                }
            }
        }
        let mut edges = Vec::new();
        for i in 0..sites.len() {
            for j in i + 1..sites.len() {
                if sites[i].l1_dist(&sites[j]) == 1 {
                    edges.push((i, j));
                }
            }
        }
        let w = TinyWindow { sites, edges, kappa, dim };
        // Conditioning guard: I - Q/(1+kappa) must stay comfortably away from
        // singular. Sub-stochasticity makes this automatic on genuine lattice
        // subsets, so tripping it means the input was not one.
        let gap = 1.0 - w.spectral_radius() / (1.0 + kappa);
        if gap < 1e-9 {
            return Err(Error::Numerical(format!(
                "kernel too close to critical: spectral gap {gap:.3e}"
            )));
        }
        Ok(w)
    }

    /// All sites of a box, in the same lexicographic order the sampler uses.
    pub fn from_cuboid(domain: &Cuboid, kappa: f64) -> Result<TinyWindow> {
        TinyWindow::from_sites(domain.sites(), kappa)
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn sites(&self) -> &[Point] {
        &self.sites
    }

    /// Internal edges as pairs of site indices, each with `i < j`, ordered by
    /// `(i, j)`. Edge bitmasks throughout this module index into this list.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn site_index(&self, p: &Point) -> Option<usize> {
        self.sites.iter().position(|s| s == p)
    }

    pub fn edge_endpoints(&self, e: usize) -> (&Point, &Point) {
        let (i, j) = self.edges[e];
        (&self.sites[i], &self.sites[j])
    }

    /// Index of the internal edge between two sites, if both are in the
    /// window and adjacent.
    pub fn edge_index(&self, a: &Point, b: &Point) -> Option<usize> {
        let ia = self.site_index(a)?;
        let ib = self.site_index(b)?;
        let key = (ia.min(ib), ia.max(ib));
        self.edges.iter().position(|&e| e == key)
    }

    /// Walk kernel with the edges in `zeroed` removed. Entries are `1/(2d)`
    /// on surviving internal edges; no `kappa` scaling here.
    fn kernel(&self, zeroed: u32) -> DMatrix<f64> {
        let n = self.sites.len();
        let q = 1.0 / (2.0 * self.dim as f64);
        let mut m = DMatrix::zeros(n, n);
        for (e, &(i, j)) in self.edges.iter().enumerate() {
            if zeroed & (1u32 << e) == 0 {
                m[(i, j)] = q;
                m[(j, i)] = q;
            }
        }
        m
    }

    fn spectral_radius(&self) -> f64 {
        self.kernel(0)
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(0.0f64, |acc, l| acc.max(l.abs()))
    }

    fn edge_mask(&self, edge_indices: &[usize]) -> Result<u32> {
        let mut mask = 0u32;
        for &e in edge_indices {
            if e >= self.edges.len() {
                return Err(Error::Precondition(format!(
                    "edge index {e} out of range (window has {} edges)",
                    self.edges.len()
                )));
            }
            mask |= 1u32 << e;
        }
        Ok(mask)
    }
}

impl fmt::Display for TinyWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} sites, {} edges, kappa {}", self.sites.len(), self.edges.len(), self.kappa)
    }
}

/// Total loop mass of the window: `-log det(I - Q/(1+kappa))` by pivoted LU.
pub fn total_mass(w: &TinyWindow) -> Result<f64> {
    masked_mass(w, 0)
}

/// Total mass with the given edges removed from the kernel. Removing an edge
/// kills exactly the loops that cross it, so differences of these values are
/// masses of loop families.
fn masked_mass(w: &TinyWindow, zeroed: u32) -> Result<f64> {
    let n = w.num_sites();
    let a = w.kernel(zeroed) / (1.0 + w.kappa);
    let det = (DMatrix::identity(n, n) - a).lu().determinant();
    // The construction guard bounds the spectrum away from 1, and removing
    // edges only shrinks it, so this is a backstop.
    if !(det > 1e-12) {
        return Err(Error::Numerical(format!("near-singular kernel determinant {det:.3e}")));
    }
    Ok(-det.ln())
}

/// Truncated trace series for the same mass, plus an analytic bound on what
/// the truncation discards. Slower than the determinant; exists to check it.
pub fn mass_series(w: &TinyWindow, k_max: usize) -> (f64, f64) {
    let n = w.num_sites();
    let a = w.kernel(0) / (1.0 + w.kappa);
    let rho = w.spectral_radius() / (1.0 + w.kappa);
    let mut power = a.clone();
    let mut sum = 0.0;
    for k in 1..=k_max {
        if k >= 2 {
            sum += power.trace() / k as f64;
        }
        if k < k_max {
            power = &power * &a;
        }
    }
    // tr(A^k) <= n rho^k, summed past the cutoff.
    let tail = n as f64 * rho.powi(k_max as i32 + 1) / ((k_max as f64 + 1.0) * (1.0 - rho));
    (sum, tail)
}

/// P[every edge of `s` is closed] under the soup at intensity `alpha`.
///
/// An edge is open when some loop of the soup traverses it, so all of `s`
/// closed means no loop crossing `s` arrived. The arrivals crossing `s` are
/// Poisson with mean `alpha` times the mass the kernel loses when `s` is
/// removed.
pub fn closed_probability(w: &TinyWindow, s: &[usize], alpha: f64) -> Result<f64> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Precondition(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let mask = w.edge_mask(s)?;
    let full = masked_mass(w, 0)?;
    let without = masked_mass(w, mask)?;
    Ok((-alpha * (full - without)).exp())
}

/// Joint law of the open-edge pattern, one atom per subset of the internal
/// edges.
#[derive(Clone, Debug)]
pub struct EdgeStateLaw {
    num_edges: usize,
    atoms: Vec<f64>,
    clamped: usize,
}

impl EdgeStateLaw {
    pub fn num_edges(&self) -> usize {
        self.num_edges
    }

    /// Probability that exactly the edges in `open` are open.
    pub fn probability(&self, open: u32) -> f64 {
        self.atoms[open as usize]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    /// How many atoms were rounded up to zero from tiny negative values left
    /// by the alternating sums. A handful is normal; callers that care can
    /// surface it.
    pub fn clamped_atoms(&self) -> usize {
        self.clamped
    }

    /// P[every edge of `mask` is open], by direct summation.
    pub fn marginal_open(&self, mask: u32) -> f64 {
        self.atoms
            .iter()
            .enumerate()
            .filter(|(o, _)| *o as u32 & mask == mask)
            .map(|(_, p)| p)
            .sum()
    }
}

/// Compute the full joint law by inclusion-exclusion over closed subsets.
///
/// `f(T) = P[all of T closed]` comes from `closed_probability`; a signed
/// superset sum (Moebius over the subset lattice) turns those marginals into
/// point masses.
pub fn edge_state_law(w: &TinyWindow, alpha: f64) -> Result<EdgeStateLaw> {
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Precondition(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let e = w.num_edges();
    if e > MAX_ORACLE_EDGES {
        return Err(Error::Precondition(format!(
            "window has {e} internal edges, joint law is capped at {MAX_ORACLE_EDGES}"
        )));
    }
    let full_mass = masked_mass(w, 0)?;
    let size = 1usize << e;
    let mut table = Vec::with_capacity(size);
    for t in 0..size {
        let without = masked_mass(w, t as u32)?;
        table.push((-alpha * (full_mass - without)).exp());
    }
    moebius_over_supersets(&mut table, e);
    // After the transform, table[u] = P[exactly the edges outside u are open].
    let all = size - 1;
    let mut atoms = vec![0.0; size];
    for (u, &v) in table.iter().enumerate() {
        atoms[all ^ u] = v;
    }
    let mut clamped = 0;
    for a in atoms.iter_mut() {
        if *a < 0.0 {
            if *a < -1e-12 {
                return Err(Error::Numerical(format!("edge-state atom {a:.3e} below tolerance")));
            }
            *a = 0.0;
            clamped += 1;
        }
    }
    let sum: f64 = atoms.iter().sum();
    if (sum - 1.0).abs() > 1e-10 {
        return Err(Error::Numerical(format!("edge-state atoms sum to {sum}, expected 1")));
    }
    Ok(EdgeStateLaw { num_edges: e, atoms, clamped })
}

/// In place: `v[u] <- sum over supersets c of u of (-1)^{|c \ u|} v[c]`.
fn moebius_over_supersets(v: &mut [f64], bits: usize) {
    for b in 0..bits {
        let bit = 1usize << b;
        for u in 0..v.len() {
            if u & bit == 0 {
                v[u] -= v[u | bit];
            }
        }
    }
}

/// For every open-edge pattern, whether `origin` reaches any site of
/// `targets` through open edges. Index by pattern bitmask.
fn connectivity_table(w: &TinyWindow, origin: usize, targets: &[usize]) -> Vec<bool> {
    let e = w.num_edges();
    let size = 1usize << e;
    let n = w.num_sites();
    let mut target_set = vec![false; n];
    for &t in targets {
        target_set[t] = true;
    }
    let mut table = vec![false; size];
    let mut seen = vec![false; n];
    let mut stack = Vec::with_capacity(n);
    for (o, entry) in table.iter_mut().enumerate() {
        seen.iter_mut().for_each(|s| *s = false);
        stack.clear();
        seen[origin] = true;
        stack.push(origin);
        'bfs: while let Some(x) = stack.pop() {
            if target_set[x] {
                *entry = true;
                break 'bfs;
            }
            for (idx, &(i, j)) in w.edges.iter().enumerate() {
                if o & (1usize << idx) == 0 {
                    continue;
                }
                let y = if i == x {
                    j
                } else if j == x {
                    i
                } else {
                    continue;
                };
                if !seen[y] {
                    seen[y] = true;
                    stack.push(y);
                }
            }
        }
    }
    table
}

fn resolve_sites(w: &TinyWindow, origin: &Point, targets: &[Point]) -> Result<(usize, Vec<usize>)> {
    let oi = w
        .site_index(origin)
        .ok_or_else(|| Error::Precondition(format!("origin {origin} not in window")))?;
    let mut tis = Vec::with_capacity(targets.len());
    for t in targets {
        let ti = w
            .site_index(t)
            .ok_or_else(|| Error::Precondition(format!("target {t} not in window")))?;
        tis.push(ti);
    }
    if tis.is_empty() {
        return Err(Error::Precondition("empty target set".into()));
    }
    Ok((oi, tis))
}

/// Exact P[origin connects to the target set through open edges].
pub fn exact_theta(w: &TinyWindow, origin: &Point, targets: &[Point], alpha: f64) -> Result<f64> {
    let (oi, tis) = resolve_sites(w, origin, targets)?;
    if tis.contains(&oi) {
        return Ok(1.0);
    }
    let law = edge_state_law(w, alpha)?;
    let conn = connectivity_table(w, oi, &tis);
    Ok(conn
        .iter()
        .zip(law.atoms.iter())
        .filter_map(|(c, p)| if *c { Some(*p) } else { None })
        .sum())
}

/// Same probability assembled in the opposite order: fold the connectivity
/// indicator through the signed subset sums first, then take one dot product
/// with the closed-marginal table. Exists to cross-check `exact_theta`;
/// agreement is a real test of the transform, not a tautology.
pub fn theta_by_subset_sums(
    w: &TinyWindow,
    origin: &Point,
    targets: &[Point],
    alpha: f64,
) -> Result<f64> {
    let (oi, tis) = resolve_sites(w, origin, targets)?;
    if tis.contains(&oi) {
        return Ok(1.0);
    }
    let e = w.num_edges();
    if e > MAX_ORACLE_EDGES {
        return Err(Error::Precondition(format!(
            "window has {e} internal edges, subset sums are capped at {MAX_ORACLE_EDGES}"
        )));
    }
    let size = 1usize << e;
    let all = size - 1;
    let conn = connectivity_table(w, oi, &tis);
    // c[t] = sum over u subset of t of (-1)^{|t \ u|} conn(complement of u),
    // so that theta = sum over t of c[t] * P[all of t closed].
    let mut coeff: Vec<f64> = (0..size).map(|u| if conn[all ^ u] { 1.0 } else { 0.0 }).collect();
    for b in 0..e {
        let bit = 1usize << b;
        for u in 0..size {
            if u & bit != 0 {
                let prev = coeff[u ^ bit];
                coeff[u] -= prev;
            }
        }
    }
    let full_mass = masked_mass(w, 0)?;
    let mut theta = 0.0;
    for (t, &c) in coeff.iter().enumerate() {
        if c != 0.0 {
            let without = masked_mass(w, t as u32)?;
            theta += c * (-alpha * (full_mass - without)).exp();
        }
    }
    Ok(theta)
}

/// Per-subset mass bookkeeping for one perturbed length class: for each
/// closed subset `t`, the total mass drop and the length-`2i` mass drop
/// relative to the full window, from one symmetric eigendecomposition each.
struct MassDrops {
    total: Vec<f64>,
    length: Vec<f64>,
    length_full: f64,
}

fn mass_drops(w: &TinyWindow, half_len: usize) -> Result<MassDrops> {
    let e = w.num_edges();
    if e > MAX_ORACLE_EDGES {
        return Err(Error::Precondition(format!(
            "window has {e} internal edges, cap is {MAX_ORACLE_EDGES}"
        )));
    }
    let k = 2 * half_len;
    let size = 1usize << e;
    let mut total = Vec::with_capacity(size);
    let mut length = Vec::with_capacity(size);
    for t in 0..size {
        let a = w.kernel(t as u32) / (1.0 + w.kappa);
        let eig = a.symmetric_eigen().eigenvalues;
        let mut m_total = 0.0;
        let mut m_len = 0.0;
        for &lam in eig.iter() {
            if lam >= 1.0 {
                return Err(Error::Numerical(format!("kernel eigenvalue {lam} >= 1")));
            }
            m_total += -(1.0 - lam).ln();
            m_len += lam.powi(k as i32);
        }
        total.push(m_total);
        length.push(m_len / k as f64);
    }
    let full = total[0];
    let length_full = length[0];
    for v in total.iter_mut() {
        *v = full - *v;
    }
    for v in length.iter_mut() {
        *v = length_full - *v;
    }
    Ok(MassDrops { total, length, length_full })
}

/// theta with the mass of length-`2i` loops scaled by `b`, everything else
/// at weight one.
fn theta_with_length_multiplier(
    drops: &MassDrops,
    conn: &[bool],
    e: usize,
    alpha: f64,
    b: f64,
) -> f64 {
    let size = 1usize << e;
    let all = size - 1;
    let mut table: Vec<f64> = (0..size)
        .map(|t| (-alpha * (drops.total[t] + (b - 1.0) * drops.length[t])).exp())
        .collect();
    moebius_over_supersets(&mut table, e);
    let mut theta = 0.0;
    for (u, &v) in table.iter().enumerate() {
        if conn[all ^ u] {
            theta += v;
        }
    }
    theta
}

/// Derivative of the connection probability in the weight of length-`2i`
/// loops, at unit weight. Central differences with one Richardson step; the
/// window is tiny so each evaluation is exact up to roundoff.
pub fn russo_derivative(
    w: &TinyWindow,
    origin: &Point,
    targets: &[Point],
    alpha: f64,
    half_len: usize,
) -> Result<f64> {
    if half_len == 0 {
        return Err(Error::Precondition("loop lengths start at 2, so half-length >= 1".into()));
    }
    if !(alpha.is_finite() && alpha >= 0.0) {
        return Err(Error::Precondition(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    let (oi, tis) = resolve_sites(w, origin, targets)?;
    if tis.contains(&oi) {
        return Ok(0.0);
    }
    let drops = mass_drops(w, half_len)?;
    if drops.length_full == 0.0 {
        // No loop of this length fits in the window; the weight is inert.
        return Ok(0.0);
    }
    let conn = connectivity_table(w, oi, &tis);
    let e = w.num_edges();
    let theta = |b: f64| theta_with_length_multiplier(&drops, &conn, e, alpha, b);
    let coarse = (theta(1.0 + FD_STEP) - theta(1.0 - FD_STEP)) / (2.0 * FD_STEP);
    let fine = (theta(1.0 + FD_STEP / 2.0) - theta(1.0 - FD_STEP / 2.0)) / FD_STEP;
    Ok((4.0 * fine - coarse) / 3.0)
}

/// The same derivative as a sum over pivotal loops: each loop class of
/// length `2i`, weighted by its mass, times the probability that adding that
/// one loop creates the connection. Exhaustive over classes, so capped at
/// short lengths. Used to cross-check `russo_derivative`.
pub fn russo_derivative_pivotal(
    w: &TinyWindow,
    origin: &Point,
    targets: &[Point],
    alpha: f64,
    half_len: usize,
) -> Result<f64> {
    if half_len == 0 || half_len > MAX_PIVOTAL_HALF_LEN {
        return Err(Error::Precondition(format!(
            "pivotal enumeration covers half-lengths 1..={MAX_PIVOTAL_HALF_LEN}, got {half_len}"
        )));
    }
    let (oi, tis) = resolve_sites(w, origin, targets)?;
    if tis.contains(&oi) {
        return Ok(0.0);
    }
    let law = edge_state_law(w, alpha)?;
    let conn = connectivity_table(w, oi, &tis);
    let k = 2 * half_len;
    let mut acc = 0.0;
    for class in closed_classes(w, k) {
        if class.len() != k {
            continue;
        }
        let mask = loop_edge_mask(w, &class)
            .expect("enumerated loop stays on window edges") as usize;
        let mut pivotal = 0.0;
        for (o, &p) in law.atoms.iter().enumerate() {
            if !conn[o] && conn[o | mask] {
                pivotal += p;
            }
        }
        acc += class.mass(w.kappa) * pivotal;
    }
    Ok(alpha * acc)
}

/// Both derivatives and their ratio, the witness constant for comparing a
/// short-loop weight against a longer one.
#[derive(Clone, Copy, Debug)]
pub struct DerivativeComparison {
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

pub fn derivative_comparison(
    w: &TinyWindow,
    origin: &Point,
    targets: &[Point],
    alpha: f64,
    i: usize,
    j: usize,
) -> Result<DerivativeComparison> {
    if i == 0 || j == 0 {
        return Err(Error::Precondition("half-lengths start at 1".into()));
    }
    // Both length classes must actually occur in the window, else the ratio
    // compares nothing.
    for (name, half) in [("2i", i), ("2j", j)] {
        if mass_drops(w, half)?.length_full == 0.0 {
            return Err(Error::Precondition(format!(
                "window has no loops of length {name} = {}",
                2 * half
            )));
        }
    }
    let lhs = russo_derivative(w, origin, targets, alpha, i)?;
    let rhs = russo_derivative(w, origin, targets, alpha, j)?;
    let ratio = if rhs.abs() <= DERIV_ZERO {
        if lhs.abs() <= DERIV_ZERO {
            // Both flat, e.g. a saturated connection. Any constant works.
            1.0
        } else {
            return Err(Error::Numerical(format!(
                "derivative comparison falsified: lhs {lhs:.6e} with rhs {rhs:.6e}"
            )));
        }
    } else {
        lhs / rhs
    };
    if !ratio.is_finite() {
        return Err(Error::Numerical(format!("non-finite derivative ratio {ratio}")));
    }
    Ok(DerivativeComparison { lhs, rhs, ratio })
}

/// Bitmask of window edges a loop traverses, or None if it strays off them.
pub fn loop_edge_mask(w: &TinyWindow, l: &Loop) -> Option<u32> {
    let mut mask = 0u32;
    for (a, b) in l.edges() {
        mask |= 1u32 << w.edge_index(a, b)?;
    }
    Some(mask)
}

/// Every loop class of length at most `k_max` supported on the window's
/// sites, by depth-first search over closed walks. Each class is found from
/// its minimal site index and deduplicated through the canonical rotation.
pub fn closed_classes(w: &TinyWindow, k_max: usize) -> Vec<Loop> {
    let n = w.num_sites();
    let mut adj = vec![Vec::new(); n];
    for &(i, j) in &w.edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    let mut found: HashSet<Loop> = HashSet::new();
    let mut walk = Vec::with_capacity(k_max);
    for start in 0..n {
        walk.clear();
        walk.push(start);
        extend_closed_walks(w, &adj, start, k_max, &mut walk, &mut found);
    }
    let mut out: Vec<Loop> = found.into_iter().collect();
    out.sort_by(|a, b| (a.len(), a.points()).cmp(&(b.len(), b.points())));
    out
}

fn extend_closed_walks(
    w: &TinyWindow,
    adj: &[Vec<usize>],
    start: usize,
    k_max: usize,
    walk: &mut Vec<usize>,
    found: &mut HashSet<Loop>,
) {
    let here = *walk.last().expect("walk is never empty");
    for &next in &adj[here] {
        // Enumerate each class once: only from its minimal site index.
        if next < start {
            continue;
        }
        walk.push(next);
        let len = walk.len();
        if next == start && len >= 3 && (len - 1) % 2 == 0 {
            let pts: Vec<Point> = walk[..len - 1].iter().map(|&i| w.sites[i].clone()).collect();
            found.insert(Loop::from_points(pts).expect("closed walk forms a loop"));
        }
        if len - 1 < k_max {
            extend_closed_walks(w, adj, start, k_max, walk, found);
        }
        walk.pop();
    }
}

// ---------------------------------------------------------------------------
// Reference corpus and golden values.

/// The fixed windows every exact quantity is pinned on. Small shapes with
/// hand-checkable spectra, one non-box shape, one nonzero kappa.
pub fn corpus() -> Vec<(String, TinyWindow)> {
    let p = |coords: &[i64]| Point::new(coords);
    let build = |name: &str, sites: Vec<Point>, kappa: f64| {
        (
            name.to_string(),
            TinyWindow::from_sites(sites, kappa).expect("corpus windows are valid"),
        )
    };
    vec![
        build("two-site", vec![p(&[0, 0, 0]), p(&[1, 0, 0])], 0.0),
        build("three-site-path", vec![p(&[0, 0, 0]), p(&[1, 0, 0]), p(&[2, 0, 0])], 0.0),
        build("l-tromino", vec![p(&[0, 0, 0]), p(&[1, 0, 0]), p(&[0, 1, 0])], 0.0),
        build(
            "square-2x2",
            vec![p(&[0, 0, 0]), p(&[0, 1, 0]), p(&[1, 0, 0]), p(&[1, 1, 0])],
            0.0,
        ),
        build(
            "path-1x4",
            vec![p(&[0, 0, 0]), p(&[1, 0, 0]), p(&[2, 0, 0]), p(&[3, 0, 0])],
            0.0,
        ),
        build(
            "rect-2x3",
            Cuboid::new(p(&[0, 0, 0]), p(&[1, 2, 0])).expect("valid box").sites(),
            0.0,
        ),
        build(
            "cube-2x2x2",
            Cuboid::new(p(&[0, 0, 0]), p(&[1, 1, 1])).expect("valid box").sites(),
            0.0,
        ),
        build(
            "grid-3x3",
            Cuboid::new(p(&[0, 0, 0]), p(&[2, 2, 0])).expect("valid box").sites(),
            0.0,
        ),
        build("two-site-kappa-half", vec![p(&[0, 0, 0]), p(&[1, 0, 0])], 0.5),
    ]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenFile {
    pub version: u32,
    pub windows: Vec<GoldenWindow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GoldenWindow {
    pub name: String,
    pub kappa: f64,
    pub sites: Vec<Vec<i64>>,
    pub total_mass: f64,
    pub checks: Vec<GoldenCheck>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GoldenCheck {
    ClosedProbability { edges: Vec<usize>, alpha: f64, value: f64 },
    Theta { origin: Vec<i64>, targets: Vec<Vec<i64>>, alpha: f64, value: f64 },
    DerivativeInLength { origin: Vec<i64>, targets: Vec<Vec<i64>>, alpha: f64, half_len: usize, value: f64 },
}

/// Absolute tolerance when replaying golden values. All quantities are O(1)
/// probabilities or masses computed by dense linear algebra.
pub const GOLDEN_TOL: f64 = 1e-10;

/// Recompute every golden quantity for the fixed corpus.
pub fn compute_golden() -> Result<GoldenFile> {
    let mut windows = Vec::new();
    for (name, w) in corpus() {
        let sites: Vec<Vec<i64>> = w.sites().iter().map(|p| p.coords().to_vec()).collect();
        let origin = w.sites().first().expect("nonempty").clone();
        let target = w.sites().last().expect("nonempty").clone();
        let mut checks = Vec::new();
        for alpha in [0.5, 1.0, 4.0] {
            checks.push(GoldenCheck::ClosedProbability {
                edges: vec![0],
                alpha,
                value: closed_probability(&w, &[0], alpha)?,
            });
            checks.push(GoldenCheck::Theta {
                origin: origin.coords().to_vec(),
                targets: vec![target.coords().to_vec()],
                alpha,
                value: exact_theta(&w, &origin, &[target.clone()], alpha)?,
            });
        }
        checks.push(GoldenCheck::DerivativeInLength {
            origin: origin.coords().to_vec(),
            targets: vec![target.coords().to_vec()],
            alpha: 1.0,
            half_len: 1,
            value: russo_derivative(&w, &origin, &[target.clone()], 1.0, 1)?,
        });
        windows.push(GoldenWindow {
            name,
            kappa: w.kappa(),
            sites,
            total_mass: total_mass(&w)?,
            checks,
        });
    }
    Ok(GoldenFile { version: 1, windows })
}

/// One mismatch between a stored golden value and a fresh computation.
#[derive(Clone, Debug, Serialize)]
pub struct GoldenMismatch {
    pub window: String,
    pub what: String,
    pub stored: f64,
    pub fresh: f64,
}

impl fmt::Display for GoldenMismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {} stored {:.15e} vs fresh {:.15e}",
            self.window, self.what, self.stored, self.fresh
        )
    }
}

/// Replay a golden file against fresh computations. Returns the number of
/// checks that ran and every mismatch beyond tolerance.
pub fn validate_golden(golden: &GoldenFile) -> Result<(usize, Vec<GoldenMismatch>)> {
    if golden.version != 1 {
        return Err(Error::Config(format!("unknown golden file version {}", golden.version)));
    }
    let mut ran = 0;
    let mut mismatches = Vec::new();
    for gw in &golden.windows {
        let sites: Vec<Point> = gw.sites.iter().map(|c| Point::new(c)).collect();
        let w = TinyWindow::from_sites(sites, gw.kappa)?;
        let mut push = |what: String, stored: f64, fresh: f64| {
            if (stored - fresh).abs() > GOLDEN_TOL {
                mismatches.push(GoldenMismatch { window: gw.name.clone(), what, stored, fresh });
            }
        };
        ran += 1;
        push("total-mass".into(), gw.total_mass, total_mass(&w)?);
        for check in &gw.checks {
            ran += 1;
            match check {
                GoldenCheck::ClosedProbability { edges, alpha, value } => {
                    let fresh = closed_probability(&w, edges, *alpha)?;
                    push(format!("closed-probability alpha {alpha}"), *value, fresh);
                }
                GoldenCheck::Theta { origin, targets, alpha, value } => {
                    let o = Point::new(origin);
                    let ts: Vec<Point> = targets.iter().map(|c| Point::new(c)).collect();
                    let fresh = exact_theta(&w, &o, &ts, *alpha)?;
                    push(format!("theta alpha {alpha}"), *value, fresh);
                }
                GoldenCheck::DerivativeInLength { origin, targets, alpha, half_len, value } => {
                    let o = Point::new(origin);
                    let ts: Vec<Point> = targets.iter().map(|c| Point::new(c)).collect();
                    let fresh = russo_derivative(&w, &o, &ts, *alpha, *half_len)?;
                    push(format!("derivative half-len {half_len}"), *value, fresh);
                }
            }
        }
    }
    Ok((ran, mismatches))
}
