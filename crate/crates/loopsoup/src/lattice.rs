//! Axis-aligned geometry on the integer lattice Z^d: points, sup-norm boxes,
//! cuboids, slabs, the side-m cell grid, and finite simulation windows with
//! dense site/edge indexing.

use serde::{Deserialize, Serialize};
use smallvec::SmallVec;
use std::fmt;

use crate::{Error, Result};

/// Largest ambient dimension the crate supports.
pub const MAX_DIM: usize = 8;

/// Hard cap on addressable sites in a single window.
pub const MAX_WINDOW_SITES: u128 = 1 << 31;

/// A lattice site in Z^d. Coordinates are stored inline for d <= 4, so points
/// are cheap to clone in sampling hot paths.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct Point(SmallVec<[i64; 4]>);

impl Point {
    pub fn new(coords: &[i64]) -> Self {
        assert!(
            !coords.is_empty() && coords.len() <= MAX_DIM,
            "point dimension must be in 1..={MAX_DIM}"
        );
        Point(SmallVec::from_slice(coords))
    }

    pub fn origin(d: usize) -> Self {
        Point::new(&vec![0; d])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn coords(&self) -> &[i64] {
        &self.0
    }

    pub fn coord(&self, axis: usize) -> i64 {
        self.0[axis]
    }

    pub fn sup_norm(&self) -> i64 {
        self.0.iter().map(|c| c.abs()).max().unwrap_or(0)
    }

    pub fn sup_dist(&self, other: &Point) -> i64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .max()
            .unwrap_or(0)
    }

    pub fn l1_dist(&self, other: &Point) -> i64 {
        debug_assert_eq!(self.dim(), other.dim());
        self.0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    /// The point shifted by `delta` along one axis.
    pub fn translated(&self, axis: usize, delta: i64) -> Point {
        let mut c = self.0.clone();
        c[axis] += delta;
        Point(c)
    }

    pub fn add(&self, other: &Point) -> Point {
        debug_assert_eq!(self.dim(), other.dim());
        Point(
            self.0
                .iter()
                .zip(other.0.iter())
                .map(|(a, b)| a + b)
                .collect(),
        )
    }

    /// True iff the two points are nearest neighbors (l1 distance 1).
    pub fn is_neighbor_of(&self, other: &Point) -> bool {
        self.dim() == other.dim() && self.l1_dist(other) == 1
    }

    /// The 2d nearest neighbors, in (axis, -1/+1) order.
    pub fn neighbors(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.dim()).flat_map(move |axis| {
            [-1i64, 1].into_iter().map(move |s| self.translated(axis, s))
        })
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl fmt::Display for Cuboid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lo, self.hi)
    }
}

/// Sup-norm box B(x, r) = x + {-r, ..., r}^d.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cube {
    pub center: Point,
    pub radius: i64,
}

impl Cube {
    pub fn new(center: Point, radius: i64) -> Self {
        assert!(radius >= 0, "cube radius must be nonnegative");
        Cube { center, radius }
    }

    pub fn around_origin(d: usize, radius: i64) -> Self {
        Cube::new(Point::origin(d), radius)
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.sup_dist(&self.center) <= self.radius
    }

    pub fn to_cuboid(&self) -> Cuboid {
        let d = self.center.dim();
        let lo: Vec<i64> = (0..d).map(|i| self.center.coord(i) - self.radius).collect();
        let hi: Vec<i64> = (0..d).map(|i| self.center.coord(i) + self.radius).collect();
        Cuboid::new(Point::new(&lo), Point::new(&hi)).expect("cube bounds are ordered")
    }

    pub fn num_sites(&self) -> u128 {
        self.to_cuboid().num_sites()
    }

    /// All sites, sorted lexicographically.
    pub fn sites(&self) -> Vec<Point> {
        self.to_cuboid().sites()
    }

    /// The sup-norm shell: sites at distance exactly `radius` from the center.
    pub fn boundary_sites(&self) -> Vec<Point> {
        self.sites()
            .into_iter()
            .filter(|p| p.sup_dist(&self.center) == self.radius)
            .collect()
    }
}

/// Axis-aligned cuboid with inclusive bounds on every axis.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cuboid {
    lo: Point,
    hi: Point,
}

impl Cuboid {
    pub fn new(lo: Point, hi: Point) -> Result<Self> {
        if lo.dim() != hi.dim() {
            return Err(Error::Geometry(format!(
                "cuboid bounds have mixed dimensions {} and {}",
                lo.dim(),
                hi.dim()
            )));
        }
        for i in 0..lo.dim() {
            if lo.coord(i) > hi.coord(i) {
                return Err(Error::Geometry(format!(
                    "cuboid axis {i} empty: lo {} > hi {}",
                    lo.coord(i),
                    hi.coord(i)
                )));
            }
        }
        Ok(Cuboid { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.dim()
    }

    pub fn lo(&self) -> &Point {
        &self.lo
    }

    pub fn hi(&self) -> &Point {
        &self.hi
    }

    /// Number of sites along one axis.
    pub fn side_len(&self, axis: usize) -> i64 {
        self.hi.coord(axis) - self.lo.coord(axis) + 1
    }

    pub fn num_sites(&self) -> u128 {
        (0..self.dim()).map(|i| self.side_len(i) as u128).product()
    }

    pub fn contains(&self, p: &Point) -> bool {
        p.dim() == self.dim()
            && (0..self.dim()).all(|i| self.lo.coord(i) <= p.coord(i) && p.coord(i) <= self.hi.coord(i))
    }

    /// All sites in lexicographic order.
    pub fn sites(&self) -> Vec<Point> {
        let d = self.dim();
        let mut out = Vec::with_capacity(self.num_sites() as usize);
        let mut cur: Vec<i64> = self.lo.coords().to_vec();
        loop {
            out.push(Point::new(&cur));
            // Odometer increment from the last axis, matching lex order.
            let mut axis = d;
            loop {
                if axis == 0 {
                    return out;
                }
                axis -= 1;
                if cur[axis] < self.hi.coord(axis) {
                    cur[axis] += 1;
                    break;
                }
                cur[axis] = self.lo.coord(axis);
            }
        }
    }

    /// The cuboid grown by `margin` in every direction.
    pub fn expand(&self, margin: i64) -> Cuboid {
        let d = self.dim();
        let lo: Vec<i64> = (0..d).map(|i| self.lo.coord(i) - margin).collect();
        let hi: Vec<i64> = (0..d).map(|i| self.hi.coord(i) + margin).collect();
        Cuboid::new(Point::new(&lo), Point::new(&hi)).expect("expanded bounds stay ordered")
    }

    pub fn intersect(&self, other: &Cuboid) -> Option<Cuboid> {
        let d = self.dim();
        let lo: Vec<i64> = (0..d)
            .map(|i| self.lo.coord(i).max(other.lo.coord(i)))
            .collect();
        let hi: Vec<i64> = (0..d)
            .map(|i| self.hi.coord(i).min(other.hi.coord(i)))
            .collect();
        Cuboid::new(Point::new(&lo), Point::new(&hi)).ok()
    }

    /// Sup-norm distance from `p` to the complement of the cuboid, minus one:
    /// 0 on the boundary shell, and >= r exactly when B(p, r) fits inside.
    pub fn margin_of(&self, p: &Point) -> i64 {
        (0..self.dim())
            .map(|i| (p.coord(i) - self.lo.coord(i)).min(self.hi.coord(i) - p.coord(i)))
            .min()
            .unwrap_or(0)
    }
}

/// Grid index of the side-m cell containing `p`: cell k has sites
/// k_i m <= x_i < (k_i + 1) m on every axis, with floor division toward
/// minus infinity so the cells tile all of Z^d.
pub fn cell_index(p: &Point, m: i64) -> Point {
    assert!(m > 0, "cell side must be positive");
    let c: Vec<i64> = p.coords().iter().map(|&x| x.div_euclid(m)).collect();
    Point::new(&c)
}

/// The cuboid of the side-m cell with grid index `k`.
pub fn cell_cuboid(k: &Point, m: i64) -> Cuboid {
    assert!(m > 0, "cell side must be positive");
    let d = k.dim();
    let lo: Vec<i64> = (0..d).map(|i| k.coord(i) * m).collect();
    let hi: Vec<i64> = (0..d).map(|i| k.coord(i) * m + m - 1).collect();
    Cuboid::new(Point::new(&lo), Point::new(&hi)).expect("cell bounds are ordered")
}

/// The slab Z_+^2 x {0, ..., width}^(d-2): two free quarter-plane axes and
/// d-2 confined axes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slab {
    pub width: i64,
}

impl Slab {
    pub fn new(width: i64) -> Self {
        assert!(width >= 0, "slab width must be nonnegative");
        Slab { width }
    }

    pub fn contains(&self, p: &Point) -> bool {
        let d = p.dim();
        if d < 3 {
            return false;
        }
        p.coord(0) >= 0
            && p.coord(1) >= 0
            && (2..d).all(|i| 0 <= p.coord(i) && p.coord(i) <= self.width)
    }
}

/// Boundary convention of a window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BoundaryMode {
    /// Loops must stay inside the domain; walks leaving it are killed.
    Absorbing,
    /// Loops live on the free lattice and may exit the domain; only the
    /// length cutoff truncates them.
    OpenWithTailCutoff,
}

/// A finite simulation window: a cuboid domain with a boundary convention and
/// a killing parameter kappa. Sites carry dense indices in lexicographic
/// order; lattice edges incident to the domain get slot ids for bitsets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    domain: Cuboid,
    boundary: BoundaryMode,
    kappa: f64,
    #[serde(skip)]
    lens: SmallVec<[i64; 4]>,
    #[serde(skip)]
    strides: SmallVec<[usize; 4]>,
    #[serde(skip)]
    num_sites: usize,
}

impl Window {
    pub fn new(domain: Cuboid, boundary: BoundaryMode, kappa: f64) -> Result<Self> {
        if !(kappa >= 0.0) || !kappa.is_finite() {
            return Err(Error::Precondition(format!(
                "kappa must be finite and nonnegative, got {kappa}"
            )));
        }
        let n = domain.num_sites();
        if n > MAX_WINDOW_SITES {
            return Err(Error::Capacity { requested: n });
        }
        let mut w = Window {
            domain,
            boundary,
            kappa,
            lens: SmallVec::new(),
            strides: SmallVec::new(),
            num_sites: 0,
        };
        w.rebuild_index();
        Ok(w)
    }

    /// Recompute the cached indexing; needed after deserialization because the
    /// caches are not serialized.
    pub fn rebuild_index(&mut self) {
        let d = self.domain.dim();
        self.lens = (0..d).map(|i| self.domain.side_len(i)).collect();
        // Lexicographic order: the last axis varies fastest.
        let mut strides: SmallVec<[usize; 4]> = SmallVec::from_elem(0, d);
        let mut acc = 1usize;
        for i in (0..d).rev() {
            strides[i] = acc;
            acc *= self.lens[i] as usize;
        }
        self.strides = strides;
        self.num_sites = acc;
    }

    /// Cubic window B(0, radius).
    pub fn cube(d: usize, radius: i64, boundary: BoundaryMode, kappa: f64) -> Result<Self> {
        Window::new(Cube::around_origin(d, radius).to_cuboid(), boundary, kappa)
    }

    /// Slab window [0, extent]^2 x [0, width]^(d-2) with absorbing boundary,
    /// the finite stage for crossing experiments inside Slab(width).
    pub fn slab(d: usize, extent: i64, width: i64, kappa: f64) -> Result<Self> {
        if d < 3 {
            return Err(Error::Precondition(format!(
                "slab windows need d >= 3, got {d}"
            )));
        }
        if extent < 1 || width < 0 {
            return Err(Error::Geometry(format!(
                "slab needs extent >= 1 and width >= 0, got {extent}, {width}"
            )));
        }
        let mut lo = vec![0i64; d];
        let mut hi = vec![extent, extent];
        hi.extend(std::iter::repeat(width).take(d - 2));
        lo.truncate(d);
        let domain = Cuboid::new(Point::new(&lo), Point::new(&hi))?;
        let slab = Slab::new(width);
        debug_assert!(domain.sites().iter().all(|p| slab.contains(p)));
        Window::new(domain, BoundaryMode::Absorbing, kappa)
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn domain(&self) -> &Cuboid {
        &self.domain
    }

    pub fn boundary(&self) -> BoundaryMode {
        self.boundary
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn num_sites(&self) -> usize {
        self.num_sites
    }

    pub fn contains(&self, p: &Point) -> bool {
        self.domain.contains(p)
    }

    pub fn index(&self, p: &Point) -> Option<usize> {
        if !self.domain.contains(p) {
            return None;
        }
        let mut idx = 0usize;
        for i in 0..self.dim() {
            idx += (p.coord(i) - self.domain.lo().coord(i)) as usize * self.strides[i];
        }
        Some(idx)
    }

    pub fn site(&self, idx: usize) -> Point {
        debug_assert!(idx < self.num_sites);
        let d = self.dim();
        let mut c: SmallVec<[i64; 4]> = SmallVec::with_capacity(d);
        let mut rem = idx;
        for i in 0..d {
            let q = rem / self.strides[i];
            rem %= self.strides[i];
            c.push(self.domain.lo().coord(i) + q as i64);
        }
        Point(c)
    }

    /// Coordinate of a site along one axis, without building the point.
    pub fn site_coord(&self, idx: usize, axis: usize) -> i64 {
        let q = (idx / self.strides[axis]) % self.lens[axis] as usize;
        self.domain.lo().coord(axis) + q as i64
    }

    /// Index of the neighbor one step along `axis` (dir = -1 or +1), if it is
    /// still inside the domain.
    pub fn neighbor(&self, idx: usize, axis: usize, dir: i64) -> Option<usize> {
        let q = (idx / self.strides[axis]) % self.lens[axis] as usize;
        if dir > 0 {
            if (q as i64) + 1 < self.lens[axis] {
                Some(idx + self.strides[axis])
            } else {
                None
            }
        } else if q > 0 {
            Some(idx - self.strides[axis])
        } else {
            None
        }
    }

    /// Upper bound on edge slot ids: slot = site * d + axis addresses the edge
    /// from a site to its +axis neighbor (slots at the hi face are invalid).
    pub fn num_edge_slots(&self) -> usize {
        self.num_sites * self.dim()
    }

    pub fn edge_slot(&self, idx: usize, axis: usize) -> usize {
        idx * self.dim() + axis
    }

    /// Endpoints of an edge slot, or None for slots pointing out of the domain.
    pub fn edge_endpoints(&self, slot: usize) -> Option<(usize, usize)> {
        let idx = slot / self.dim();
        let axis = slot % self.dim();
        self.neighbor(idx, axis, 1).map(|j| (idx, j))
    }

    /// Edge slot joining two neighboring site indices, if both are in the
    /// domain and adjacent.
    pub fn edge_between(&self, a: usize, b: usize) -> Option<usize> {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        for axis in 0..self.dim() {
            if self.neighbor(lo, axis, 1) == Some(hi) {
                return Some(self.edge_slot(lo, axis));
            }
        }
        None
    }

    /// Site indices on the outer shell of the domain (any axis at lo or hi).
    pub fn boundary_shell(&self) -> Vec<usize> {
        (0..self.num_sites)
            .filter(|&i| self.margin_of_index(i) == 0)
            .collect()
    }

    /// Sup-norm margin from a site to the domain's complement; 0 on the shell.
    pub fn margin_of_index(&self, idx: usize) -> i64 {
        (0..self.dim())
            .map(|i| {
                let q = ((idx / self.strides[i]) % self.lens[i] as usize) as i64;
                q.min(self.lens[i] - 1 - q)
            })
            .min()
            .unwrap_or(0)
    }

    /// Upper bound on the spectral radius of the killed step kernel Q on the
    /// domain: the exact adjacency spectrum of a product of paths gives
    /// lambda_max = sum_i 2 cos(pi / (len_i + 1)), and Q = adjacency / 2d.
    pub fn kernel_spectral_bound(&self) -> f64 {
        let d = self.dim() as f64;
        self.lens
            .iter()
            .map(|&l| (std::f64::consts::PI / (l as f64 + 1.0)).cos())
            .sum::<f64>()
            / d
    }
}
