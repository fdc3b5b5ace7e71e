//! Loops on Z^d and their weights.
//!
//! A based loop is a cyclic nearest-neighbor path (x_1, ..., x_n), n >= 2,
//! carrying weight (1/n) ((1+kappa) 2d)^{-n}; a loop is its rotation class,
//! whose mass is the based weight times the number of distinct rotations.
//! Summing the based weights of closed k-walks gives the per-length masses
//! m_k = (1/k) (1+kappa)^{-k} tr(Q^k) for the killed step kernel Q of a
//! window; [`MassTable`] stores the per-site return diagonals behind that
//! trace so Poisson counts and root sites can be sampled exactly.

use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};
use std::path::Path;

use crate::lattice::{BoundaryMode, Cuboid, Point, Window};
use crate::{Error, Result};

/// A based loop: a rooted cyclic nearest-neighbor path of even length >= 2.
/// The closing step from the last point back to the first is implicit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BasedLoop {
    pts: Vec<Point>,
}

impl BasedLoop {
    pub fn new(pts: Vec<Point>) -> Result<Self> {
        if pts.len() < 2 {
            return Err(Error::Precondition(format!(
                "a based loop needs at least 2 points, got {}",
                pts.len()
            )));
        }
        let d = pts[0].dim();
        for w in pts.windows(2) {
            if w[1].dim() != d || !w[0].is_neighbor_of(&w[1]) {
                return Err(Error::Precondition(format!(
                    "consecutive loop points must be nearest neighbors: {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        let last = &pts[pts.len() - 1];
        if !last.is_neighbor_of(&pts[0]) {
            return Err(Error::Precondition(format!(
                "loop does not close: {} -> {}",
                last, pts[0]
            )));
        }
        // Nearest-neighbor cycles on Z^d always have even length (bipartite),
        // so this can only trip on malformed input.
        debug_assert!(pts.len() % 2 == 0);
        Ok(BasedLoop { pts })
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.pts[0].dim()
    }

    pub fn points(&self) -> &[Point] {
        &self.pts
    }

    /// Weight (1/n) ((1+kappa) 2d)^{-n} of this rooted loop.
    pub fn weight(&self, kappa: f64) -> f64 {
        let n = self.len();
        let step = (1.0 + kappa) * 2.0 * self.dim() as f64;
        (1.0 / n as f64) * step.powi(-(n as i32))
    }

    /// The rotation starting at position `shift`.
    pub fn rotated(&self, shift: usize) -> BasedLoop {
        let n = self.len();
        let s = shift % n;
        let mut pts = Vec::with_capacity(n);
        pts.extend_from_slice(&self.pts[s..]);
        pts.extend_from_slice(&self.pts[..s]);
        BasedLoop { pts }
    }
}

/// A loop: the rotation class of a based loop, stored as its lexicographically
/// minimal rotation so equality and hashing are structural.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Loop {
    pts: Vec<Point>,
}

impl Loop {
    pub fn from_based(b: BasedLoop) -> Loop {
        let shift = minimal_rotation_shift(&b.pts);
        Loop {
            pts: b.rotated(shift).pts,
        }
    }

    pub fn from_points(pts: Vec<Point>) -> Result<Loop> {
        Ok(Loop::from_based(BasedLoop::new(pts)?))
    }

    pub fn len(&self) -> usize {
        self.pts.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.pts[0].dim()
    }

    pub fn points(&self) -> &[Point] {
        &self.pts
    }

    /// Smallest s > 0 with rotation-by-s fixing the sequence. Equals the
    /// number of distinct based representatives of the class.
    pub fn primitive_period(&self) -> usize {
        let n = self.len();
        for p in 1..=n {
            if n % p != 0 {
                continue;
            }
            if (0..n).all(|i| self.pts[i] == self.pts[(i + p) % n]) {
                return p;
            }
        }
        n
    }

    pub fn distinct_rotations(&self) -> usize {
        self.primitive_period()
    }

    /// Class mass: number of distinct rotations times the based weight, i.e.
    /// the push-forward of the based measure onto rotation classes.
    pub fn mass(&self, kappa: f64) -> f64 {
        let based = BasedLoop {
            pts: self.pts.clone(),
        };
        self.distinct_rotations() as f64 * based.weight(kappa)
    }

    /// Sup-norm diameter: the largest single-axis extent of the visited set.
    pub fn diameter(&self) -> i64 {
        let d = self.dim();
        (0..d)
            .map(|i| {
                let mut lo = i64::MAX;
                let mut hi = i64::MIN;
                for p in &self.pts {
                    lo = lo.min(p.coord(i));
                    hi = hi.max(p.coord(i));
                }
                hi - lo
            })
            .max()
            .unwrap_or(0)
    }

    /// The n traversed edges, consecutive pairs plus the closing step.
    pub fn edges(&self) -> impl Iterator<Item = (&Point, &Point)> + '_ {
        let n = self.len();
        (0..n).map(move |i| (&self.pts[i], &self.pts[(i + 1) % n]))
    }

    /// Number of positions (with multiplicity) lying in the cuboid.
    pub fn visits_in(&self, c: &Cuboid) -> usize {
        self.pts.iter().filter(|p| c.contains(p)).count()
    }

    pub fn contained_in(&self, c: &Cuboid) -> bool {
        self.pts.iter().all(|p| c.contains(p))
    }

    pub fn touches(&self, pred: impl Fn(&Point) -> bool) -> bool {
        self.pts.iter().any(|p| pred(p))
    }
}

/// Shift of the lexicographically minimal rotation. Candidate positions are
/// the occurrences of the minimal point; ties are resolved by comparing the
/// full rotated sequences, which stays near-linear on walks without long
/// repeated runs.
fn minimal_rotation_shift(pts: &[Point]) -> usize {
    let n = pts.len();
    let min_pt = pts.iter().min().expect("loop is nonempty");
    let mut best: Option<usize> = None;
    'cand: for s in 0..n {
        if &pts[s] != min_pt {
            continue;
        }
        let Some(b) = best else {
            best = Some(s);
            continue;
        };
        for i in 0..n {
            let x = &pts[(b + i) % n];
            let y = &pts[(s + i) % n];
            match x.cmp(y) {
                std::cmp::Ordering::Less => continue 'cand,
                std::cmp::Ordering::Greater => {
                    best = Some(s);
                    continue 'cand;
                }
                std::cmp::Ordering::Equal => {}
            }
        }
        // Full tie: keep the earlier shift.
    }
    best.expect("minimal point occurs somewhere")
}

/// Region restriction of an intensity: either no restriction or "loops fully
/// contained in the given cuboid".
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegionSpec {
    All,
    Within(Cuboid),
}

/// Intensity alpha * beta(len) * mu_kappa with an optional even length cutoff
/// and optional per-length multipliers (lengths not listed get multiplier 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Intensity {
    pub alpha: f64,
    pub kappa: f64,
    pub cutoff: Option<usize>,
    pub multipliers: BTreeMap<usize, f64>,
    pub region: RegionSpec,
}

impl Intensity {
    pub fn uniform(alpha: f64, kappa: f64) -> Self {
        Intensity {
            alpha,
            kappa,
            cutoff: None,
            multipliers: BTreeMap::new(),
            region: RegionSpec::All,
        }
    }

    /// The length-truncated soup intensity with cutoff m.
    pub fn truncated(alpha: f64, kappa: f64, m: usize) -> Self {
        Intensity {
            cutoff: Some(m),
            ..Intensity::uniform(alpha, kappa)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Precondition(format!(
                "alpha must be finite and nonnegative, got {}",
                self.alpha
            )));
        }
        if !(self.kappa >= 0.0) || !self.kappa.is_finite() {
            return Err(Error::Precondition(format!(
                "kappa must be finite and nonnegative, got {}",
                self.kappa
            )));
        }
        if let Some(m) = self.cutoff {
            if m < 2 || m % 2 != 0 {
                return Err(Error::Precondition(format!(
                    "length cutoff must be even and >= 2, got {m}"
                )));
            }
        }
        for (&len, &b) in &self.multipliers {
            if len < 2 || len % 2 != 0 || !(b >= 0.0) || !b.is_finite() {
                return Err(Error::Precondition(format!(
                    "bad multiplier {b} for length {len}"
                )));
            }
        }
        Ok(())
    }

    pub fn multiplier_for(&self, len: usize) -> f64 {
        *self.multipliers.get(&len).unwrap_or(&1.0)
    }

    /// True iff the loop is inside the cutoff and region support.
    pub fn admits(&self, l: &Loop) -> bool {
        if let Some(m) = self.cutoff {
            if l.len() > m {
                return false;
            }
        }
        match &self.region {
            RegionSpec::All => true,
            RegionSpec::Within(c) => l.contained_in(c),
        }
    }

    /// Intensity of a single loop class.
    pub fn evaluate(&self, l: &Loop) -> f64 {
        if !self.admits(l) {
            return 0.0;
        }
        self.alpha * self.multiplier_for(l.len()) * l.mass(self.kappa)
    }
}

/// Log-counts of closed k-walks on the free lattice Z^j for j <= d, built
/// from the per-axis decomposition W_j(k) = sum over even k1 of
/// C(k,k1) C(k1,k1/2) W_{j-1}(k-k1). Powers the exact free-walk sampler:
/// conditioned on per-axis step counts, a uniform closed walk is a uniform
/// shuffle of the signed step multiset.
#[derive(Clone, Debug)]
pub struct FreeWalkTable {
    d: usize,
    k_max: usize,
    ln_fact: Vec<f64>,
    /// lnw[j-1][k] = ln W_j(k); -inf for odd k.
    lnw: Vec<Vec<f64>>,
}

impl FreeWalkTable {
    pub fn build(d: usize, k_max: usize) -> Result<FreeWalkTable> {
        if d < 1 || d > crate::lattice::MAX_DIM {
            return Err(Error::Precondition(format!("bad dimension {d}")));
        }
        if k_max < 2 {
            return Err(Error::Precondition(format!(
                "free walk table needs k_max >= 2, got {k_max}"
            )));
        }
        let mut ln_fact = vec![0.0f64; k_max + 1];
        for i in 1..=k_max {
            ln_fact[i] = ln_fact[i - 1] + (i as f64).ln();
        }
        let lnc = |lf: &[f64], n: usize, k: usize| lf[n] - lf[k] - lf[n - k];
        let mut lnw: Vec<Vec<f64>> = Vec::with_capacity(d);
        let mut w1 = vec![f64::NEG_INFINITY; k_max + 1];
        for k in (0..=k_max).step_by(2) {
            w1[k] = lnc(&ln_fact, k, k / 2);
        }
        lnw.push(w1);
        for j in 2..=d {
            let prev = &lnw[j - 2];
            let mut wj = vec![f64::NEG_INFINITY; k_max + 1];
            for k in (0..=k_max).step_by(2) {
                // log-sum-exp over the step count in the new axis.
                let mut mx = f64::NEG_INFINITY;
                let mut terms = Vec::with_capacity(k / 2 + 1);
                for k1 in (0..=k).step_by(2) {
                    let t = lnc(&ln_fact, k, k1) + lnc(&ln_fact, k1, k1 / 2) + prev[k - k1];
                    terms.push(t);
                    mx = mx.max(t);
                }
                wj[k] = mx + terms.iter().map(|t| (t - mx).exp()).sum::<f64>().ln();
            }
            lnw.push(wj);
        }
        Ok(FreeWalkTable {
            d,
            k_max,
            ln_fact,
            lnw,
        })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Free-lattice return probability p_k(0,0); zero for odd k.
    pub fn return_probability(&self, k: usize) -> f64 {
        assert!(k <= self.k_max);
        if k % 2 == 1 {
            return 0.0;
        }
        (self.lnw[self.d - 1][k] - k as f64 * (2.0 * self.d as f64).ln()).exp()
    }

    /// Per-axis step counts of a uniform closed k-walk.
    pub fn sample_counts(&self, k: usize, rng: &mut impl rand::Rng) -> Vec<usize> {
        assert!(k <= self.k_max && k % 2 == 0);
        let lnc = |n: usize, r: usize| self.ln_fact[n] - self.ln_fact[r] - self.ln_fact[n - r];
        let mut counts = vec![0usize; self.d];
        let mut rem = k;
        for j in (2..=self.d).rev() {
            // Weight of putting kj steps on axis j, the remainder on axes < j.
            let prev = &self.lnw[j - 2];
            let mut weights = Vec::with_capacity(rem / 2 + 1);
            let mut mx = f64::NEG_INFINITY;
            for kj in (0..=rem).step_by(2) {
                let t = lnc(rem, kj) + lnc(kj, kj / 2) + prev[rem - kj];
                weights.push(t);
                mx = mx.max(t);
            }
            let total: f64 = weights.iter().map(|t| (t - mx).exp()).sum();
            let mut u = rng.random::<f64>() * total;
            let mut chosen = 0usize;
            for (i, t) in weights.iter().enumerate() {
                u -= (t - mx).exp();
                if u <= 0.0 {
                    chosen = 2 * i;
                    break;
                }
                chosen = 2 * i;
            }
            counts[j - 1] = chosen;
            rem -= chosen;
        }
        counts[0] = rem;
        counts
    }

    /// A uniform closed k-walk from `root`: sample per-axis counts, shuffle
    /// the signed step multiset, and integrate. Returns the k positions
    /// starting at the root (closing step implicit).
    pub fn sample_walk(
        &self,
        root: &Point,
        k: usize,
        rng: &mut impl rand::Rng,
    ) -> Vec<Point> {
        let counts = self.sample_counts(k, rng);
        let mut steps: Vec<(usize, i64)> = Vec::with_capacity(k);
        for (axis, &c) in counts.iter().enumerate() {
            for _ in 0..c / 2 {
                steps.push((axis, 1));
                steps.push((axis, -1));
            }
        }
        // Fisher-Yates; uniform shuffle of the multiset is exactly the
        // conditional law of the walk given its step counts.
        for i in (1..steps.len()).rev() {
            let j = rng.random_range(0..=i);
            steps.swap(i, j);
        }
        let mut pts = Vec::with_capacity(k);
        let mut cur = root.clone();
        pts.push(cur.clone());
        for &(axis, s) in steps.iter().take(k - 1) {
            cur = cur.translated(axis, s);
            pts.push(cur.clone());
        }
        pts
    }

    /// Upper bound on sum_{k > k_cut} (1+kappa)^{-k} p_k(0,0) per site, from
    /// the heat-kernel envelope p_k(0,0) <= c_d k^{-d/2} (even k). The
    /// constant is the local CLT limit 2 (d/(2 pi k))^{d/2} with a 15% guard;
    /// `MassTable` tests pin it against exact kernels on the computed range.
    pub fn return_tail_bound(&self, k_cut: usize, kappa: f64) -> f64 {
        assert!(self.d >= 3, "free tail bound needs d >= 3");
        let d = self.d as f64;
        let c_d = 1.15 * 2.0 * (d / (2.0 * std::f64::consts::PI)).powf(d / 2.0);
        if kappa > 0.0 {
            // Geometric decay dominates: sum_{k>K} (1+kappa)^{-k} c_d K^{-d/2}.
            let q = (1.0 + kappa).powi(-2);
            return c_d * (k_cut as f64).powf(-d / 2.0) * q / (1.0 - q)
                * (1.0 + kappa).powi(-(k_cut as i32));
        }
        // Even-k sum: (1/2) integral_K^inf x^{-d/2} dx = K^{1-d/2} / (d-2).
        c_d * (k_cut as f64).powf(1.0 - d / 2.0) / (d - 2.0)
    }

    pub fn heat_kernel_constant(d: usize) -> f64 {
        let d = d as f64;
        1.15 * 2.0 * (d / (2.0 * std::f64::consts::PI)).powf(d / 2.0)
    }
}

/// Dense DP on the clipped ball around a root: levels[j][y] = probability
/// that the killed walk goes root -> y in j steps without leaving
/// B(root, radius) or the allowed site set. Every closed k-walk stays inside
/// B(root, k/2), so with radius >= k/2 the diagonal and the bridge columns
/// are exact window kernels.
pub(crate) struct BallKernel {
    grid: Cuboid,
    strides: Vec<usize>,
    pub levels: Vec<Vec<f64>>,
    root_local: usize,
}

impl BallKernel {
    pub(crate) fn compute(
        domain: &Cuboid,
        allowed: Option<&dyn Fn(&Point) -> bool>,
        root: &Point,
        radius: i64,
        k_max: usize,
    ) -> BallKernel {
        let d = domain.dim();
        let ball = crate::lattice::Cube::new(root.clone(), radius).to_cuboid();
        let grid = ball
            .intersect(domain)
            .expect("root lies in the domain, so the clipped ball is nonempty");
        let lens: Vec<i64> = (0..d).map(|i| grid.side_len(i)).collect();
        let mut strides = vec![0usize; d];
        let mut acc = 1usize;
        for i in (0..d).rev() {
            strides[i] = acc;
            acc *= lens[i] as usize;
        }
        let n = acc;
        let index = |p: &Point| -> usize {
            (0..d)
                .map(|i| (p.coord(i) - grid.lo().coord(i)) as usize * strides[i])
                .sum()
        };
        // Mask of usable sites inside the clipped ball.
        let mut ok = vec![true; n];
        if let Some(f) = allowed {
            for (li, p) in grid.sites().iter().enumerate() {
                ok[li] = f(p);
            }
        }
        let root_local = index(root);
        assert!(ok[root_local], "root must be an allowed site");
        let step = 1.0 / (2.0 * d as f64);
        let mut levels = Vec::with_capacity(k_max + 1);
        let mut cur = vec![0.0f64; n];
        cur[root_local] = 1.0;
        levels.push(cur.clone());
        for _ in 0..k_max {
            let prev = levels.last().unwrap();
            let mut next = vec![0.0f64; n];
            for i in 0..n {
                if !ok[i] {
                    continue;
                }
                let v = prev[i];
                if v == 0.0 {
                    continue;
                }
                let contrib = v * step;
                for axis in 0..d {
                    let q = (i / strides[axis]) % lens[axis] as usize;
                    if (q as i64) + 1 < lens[axis] {
                        let j = i + strides[axis];
                        if ok[j] {
                            next[j] += contrib;
                        }
                    }
                    if q > 0 {
                        let j = i - strides[axis];
                        if ok[j] {
                            next[j] += contrib;
                        }
                    }
                }
            }
            levels.push(next);
        }
        BallKernel {
            grid,
            strides,
            levels,
            root_local,
        }
    }

    pub(crate) fn diag(&self, k: usize) -> f64 {
        self.levels[k][self.root_local]
    }

    pub(crate) fn local_index(&self, p: &Point) -> Option<usize> {
        if !self.grid.contains(p) {
            return None;
        }
        let d = self.grid.dim();
        Some(
            (0..d)
                .map(|i| (p.coord(i) - self.grid.lo().coord(i)) as usize * self.strides[i])
                .sum(),
        )
    }

    pub(crate) fn value(&self, j: usize, local: usize) -> f64 {
        self.levels[j][local]
    }
}

/// Per-length return diagonals and class masses for an absorbing window:
/// diag[k][x] = p_k(x, x) and m_k = (1/k) (1+kappa)^{-k} sum_x diag, with a
/// cumulative row per length for exact root sampling and a spectral tail
/// bound for everything beyond the cutoff.
#[derive(Clone, Debug)]
pub struct MassTable {
    pub domain: Cuboid,
    pub boundary: BoundaryMode,
    pub kappa: f64,
    pub k_max: usize,
    lengths: Vec<usize>,
    diag: Vec<Vec<f64>>,
    mass: Vec<f64>,
    root_cdf: Vec<Vec<f64>>,
    /// Upper bound on sum_{k > k_max} m_k (per unit alpha).
    pub tail_per_alpha: f64,
}

impl MassTable {
    /// Build the table for an absorbing window. Sites with a free ball of
    /// radius k_max/2 share one free-lattice diagonal; sites near the
    /// boundary get an exact clipped-ball DP.
    pub fn build(window: &Window, k_max: usize) -> Result<MassTable> {
        if window.boundary() != BoundaryMode::Absorbing {
            return Err(Error::Precondition(
                "mass tables are defined for absorbing windows; window mode uses FreeWalkTable".into(),
            ));
        }
        if k_max < 2 || k_max % 2 != 0 {
            return Err(Error::Precondition(format!(
                "k_max must be even and >= 2, got {k_max}"
            )));
        }
        let d = window.dim();
        let n = window.num_sites();
        let lengths: Vec<usize> = (2..=k_max).step_by(2).collect();
        let free = FreeWalkTable::build(d, k_max)?;
        let free_diag: Vec<f64> = lengths
            .iter()
            .map(|&k| free.return_probability(k))
            .collect();
        let interior_margin = (k_max / 2) as i64;
        let mut diag: Vec<Vec<f64>> = lengths.iter().map(|_| vec![0.0; n]).collect();
        for x in 0..n {
            if window.margin_of_index(x) >= interior_margin {
                for (li, _) in lengths.iter().enumerate() {
                    diag[li][x] = free_diag[li];
                }
            } else {
                let root = window.site(x);
                let bk = BallKernel::compute(
                    window.domain(),
                    None,
                    &root,
                    interior_margin,
                    k_max,
                );
                for (li, &k) in lengths.iter().enumerate() {
                    diag[li][x] = bk.diag(k);
                }
            }
        }
        let discount = 1.0 + window.kappa();
        let mass: Vec<f64> = lengths
            .iter()
            .enumerate()
            .map(|(li, &k)| {
                let tr: f64 = diag[li].iter().sum();
                tr * discount.powi(-(k as i32)) / k as f64
            })
            .collect();
        let root_cdf: Vec<Vec<f64>> = diag
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .map(|v| {
                        acc += v;
                        acc
                    })
                    .collect()
            })
            .collect();
        // tr(Q^k) <= num_sites * rho^k for the exact product-of-paths spectral
        // bound rho, so the omitted mass is a clean geometric tail.
        let rho = window.kernel_spectral_bound() / discount;
        let tail_per_alpha =
            n as f64 * rho.powi(k_max as i32 + 1) / ((k_max + 1) as f64 * (1.0 - rho));
        Ok(MassTable {
            domain: window.domain().clone(),
            boundary: window.boundary(),
            kappa: window.kappa(),
            k_max,
            lengths,
            diag,
            mass,
            root_cdf,
            tail_per_alpha,
        })
    }

    pub fn matches(&self, window: &Window, k_max: usize) -> bool {
        self.domain == *window.domain()
            && self.boundary == window.boundary()
            && self.kappa == window.kappa()
            && self.k_max == k_max
    }

    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    fn len_index(&self, k: usize) -> Option<usize> {
        if k < 2 || k % 2 != 0 || k > self.k_max {
            return None;
        }
        Some(k / 2 - 1)
    }

    /// Total class mass m_k of loops of length k in the window.
    pub fn len_mass(&self, k: usize) -> f64 {
        self.len_index(k).map(|i| self.mass[i]).unwrap_or(0.0)
    }

    /// Sum of m_k over the table's lengths.
    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn diag_row(&self, k: usize) -> &[f64] {
        &self.diag[self.len_index(k).expect("length inside table")]
    }

    /// Sample a root site with probability proportional to p_k(x, x).
    pub fn sample_root(&self, k: usize, rng: &mut impl rand::Rng) -> usize {
        let row = &self.root_cdf[self.len_index(k).expect("length inside table")];
        let total = *row.last().expect("window is nonempty");
        let u = rng.random::<f64>() * total;
        row.partition_point(|&c| c <= u).min(row.len() - 1)
    }

    /// Serialize to a versioned little-endian binary cache.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(b"LSMT");
        buf.extend_from_slice(&1u32.to_le_bytes());
        let d = self.domain.dim() as u32;
        buf.extend_from_slice(&d.to_le_bytes());
        buf.push(match self.boundary {
            BoundaryMode::Absorbing => 0,
            BoundaryMode::OpenWithTailCutoff => 1,
        });
        for i in 0..self.domain.dim() {
            buf.extend_from_slice(&self.domain.lo().coord(i).to_le_bytes());
            buf.extend_from_slice(&self.domain.hi().coord(i).to_le_bytes());
        }
        buf.extend_from_slice(&self.kappa.to_le_bytes());
        buf.extend_from_slice(&(self.k_max as u32).to_le_bytes());
        buf.extend_from_slice(&self.tail_per_alpha.to_le_bytes());
        let n = self.diag.first().map(|r| r.len()).unwrap_or(0) as u64;
        buf.extend_from_slice(&n.to_le_bytes());
        for row in &self.diag {
            for v in row {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<MassTable> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |bytes: &[u8], pos: &mut usize, n: usize| -> Result<Vec<u8>> {
            if *pos + n > bytes.len() {
                return Err(Error::CacheKey("truncated mass table file".into()));
            }
            let out = bytes[*pos..*pos + n].to_vec();
            *pos += n;
            Ok(out)
        };
        let magic = take(&bytes, &mut pos, 4)?;
        if magic != b"LSMT" {
            return Err(Error::CacheKey("bad magic in mass table file".into()));
        }
        let version = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap());
        if version != 1 {
            return Err(Error::CacheKey(format!(
                "unsupported mass table version {version}"
            )));
        }
        let d = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let boundary = match take(&bytes, &mut pos, 1)?[0] {
            0 => BoundaryMode::Absorbing,
            1 => BoundaryMode::OpenWithTailCutoff,
            b => {
                return Err(Error::CacheKey(format!("bad boundary byte {b}")));
            }
        };
        let mut lo = Vec::with_capacity(d);
        let mut hi = Vec::with_capacity(d);
        for _ in 0..d {
            lo.push(i64::from_le_bytes(
                take(&bytes, &mut pos, 8)?.try_into().unwrap(),
            ));
            hi.push(i64::from_le_bytes(
                take(&bytes, &mut pos, 8)?.try_into().unwrap(),
            ));
        }
        let kappa = f64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap());
        let k_max = u32::from_le_bytes(take(&bytes, &mut pos, 4)?.try_into().unwrap()) as usize;
        let tail = f64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap());
        let n = u64::from_le_bytes(take(&bytes, &mut pos, 8)?.try_into().unwrap()) as usize;
        let domain = Cuboid::new(Point::new(&lo), Point::new(&hi))?;
        let lengths: Vec<usize> = (2..=k_max).step_by(2).collect();
        let mut diag = Vec::with_capacity(lengths.len());
        for _ in &lengths {
            let mut row = Vec::with_capacity(n);
            for _ in 0..n {
                row.push(f64::from_le_bytes(
                    take(&bytes, &mut pos, 8)?.try_into().unwrap(),
                ));
            }
            diag.push(row);
        }
        let discount = 1.0 + kappa;
        let mass: Vec<f64> = lengths
            .iter()
            .enumerate()
            .map(|(li, &k)| {
                diag[li].iter().sum::<f64>() * discount.powi(-(k as i32)) / k as f64
            })
            .collect();
        let root_cdf: Vec<Vec<f64>> = diag
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .map(|v| {
                        acc += v;
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(MassTable {
            domain,
            boundary,
            kappa,
            k_max,
            lengths,
            diag,
            mass,
            root_cdf,
            tail_per_alpha: tail,
        })
    }

    /// Load and verify the cache key against the requesting window.
    pub fn load_matching(path: &Path, window: &Window, k_max: usize) -> Result<MassTable> {
        let t = MassTable::load(path)?;
        if !t.matches(window, k_max) {
            return Err(Error::CacheKey(format!(
                "cached table keyed ({:?}, {:?}, kappa={}, k_max={}) does not match request",
                t.domain, t.boundary, t.kappa, t.k_max
            )));
        }
        Ok(t)
    }
}

/// Enumerate every loop class of length <= k_max inside an absorbing window,
/// with its mass. Exhaustive DFS; guarded to test-scale inputs.
pub fn enumerate_loop_classes(window: &Window, k_max: usize) -> Result<Vec<(Loop, f64)>> {
    if window.num_sites() > 64 || k_max > 10 {
        return Err(Error::Precondition(format!(
            "loop enumeration is exponential; capped at 64 sites and k_max 10, got {} sites, k_max {}",
            window.num_sites(),
            k_max
        )));
    }
    let kappa = window.kappa();
    let mut seen: HashSet<Loop> = HashSet::new();
    let mut out: Vec<(Loop, f64)> = Vec::new();
    let mut path: Vec<usize> = Vec::new();
    for root in 0..window.num_sites() {
        path.clear();
        path.push(root);
        dfs_closed_walks(window, root, k_max, &mut path, &mut |walk| {
            let pts: Vec<Point> = walk.iter().map(|&i| window.site(i)).collect();
            let l = Loop::from_points(pts).expect("DFS walks are valid loops");
            if seen.insert(l.clone()) {
                let m = l.mass(kappa);
                out.push((l, m));
            }
        });
    }
    Ok(out)
}

fn dfs_closed_walks(
    window: &Window,
    root: usize,
    k_max: usize,
    path: &mut Vec<usize>,
    emit: &mut impl FnMut(&[usize]),
) {
    let cur = *path.last().unwrap();
    let steps_used = path.len() - 1;
    for axis in 0..window.dim() {
        for dir in [-1i64, 1] {
            let Some(next) = window.neighbor(cur, axis, dir) else {
                continue;
            };
            // Prune: must be able to return to the root in the remaining steps.
            let remaining = k_max - (steps_used + 1);
            let dist = window.site(next).sup_dist(&window.site(root)) as usize;
            if dist > remaining {
                continue;
            }
            if next == root && (steps_used + 1) >= 2 {
                emit(&path[..]);
            }
            if steps_used + 1 < k_max {
                path.push(next);
                dfs_closed_walks(window, root, k_max, path, emit);
                path.pop();
            }
        }
    }
}

/// Mass of loops of length <= k_max meeting both site sets, by
/// inclusion-exclusion over masked windows:
/// mu(meets A and B) = m(G) - m(G\A) - m(G\B) + m(G\(A u B)).
/// Exact but dense; for annulus-scale inputs use the Monte Carlo route in
/// the sampler module.
pub struct ConnectionMass {
    pub value: f64,
    /// Upper bound on the length-truncation error of the value.
    pub tail_bound: f64,
}

pub fn one_loop_connection_mass(
    window: &Window,
    a: &[Point],
    b: &[Point],
    k_max: usize,
) -> Result<ConnectionMass> {
    if window.boundary() != BoundaryMode::Absorbing {
        return Err(Error::Precondition(
            "exact connection mass needs an absorbing window".into(),
        ));
    }
    if k_max < 2 || k_max % 2 != 0 {
        return Err(Error::Precondition(format!(
            "k_max must be even and >= 2, got {k_max}"
        )));
    }
    if window.num_sites() > 20_000 || k_max > 16 {
        return Err(Error::Precondition(format!(
            "exact route capped at 20000 sites and k_max 16 (got {} sites, k_max {}); \
             use sampler::connection_mass_mc for annulus scales",
            window.num_sites(),
            k_max
        )));
    }
    let in_window = |set: &[Point]| set.iter().filter_map(|p| window.index(p)).count();
    if in_window(a) == 0 || in_window(b) == 0 {
        return Err(Error::Precondition(
            "both site sets must intersect the window".into(),
        ));
    }
    let mask_a: HashSet<Point> = a.iter().cloned().collect();
    let mask_b: HashSet<Point> = b.iter().cloned().collect();
    let mass = |excluded: &dyn Fn(&Point) -> bool| -> f64 {
        masked_total_mass(window, excluded, k_max)
    };
    let m_full = mass(&|_p| false);
    let m_no_a = mass(&|p| mask_a.contains(p));
    let m_no_b = mass(&|p| mask_b.contains(p));
    let m_no_ab = mass(&|p| mask_a.contains(p) || mask_b.contains(p));
    let value = m_full - m_no_a - m_no_b + m_no_ab;
    // Each of the four terms truncates at k_max with at most the full
    // window's spectral tail, so four of them bound the combination.
    let discount = 1.0 + window.kappa();
    let rho = window.kernel_spectral_bound() / discount;
    let tail = window.num_sites() as f64 * rho.powi(k_max as i32 + 1)
        / ((k_max + 1) as f64 * (1.0 - rho));
    Ok(ConnectionMass {
        value,
        tail_bound: 4.0 * tail,
    })
}

/// Total loop mass sum_{k <= k_max} m_k of the window with some sites removed.
fn masked_total_mass(window: &Window, excluded: &dyn Fn(&Point) -> bool, k_max: usize) -> f64 {
    let discount = 1.0 + window.kappa();
    let radius = (k_max / 2) as i64;
    let allowed = |p: &Point| !excluded(p);
    let mut total = 0.0;
    for x in 0..window.num_sites() {
        let root = window.site(x);
        if excluded(&root) {
            continue;
        }
        let bk = BallKernel::compute(window.domain(), Some(&allowed), &root, radius, k_max);
        for k in (2..=k_max).step_by(2) {
            total += bk.diag(k) * discount.powi(-(k as i32)) / k as f64;
        }
    }
    total
}
