//! From soups to percolation clusters.
//!
//! A realization opens every edge its loops traverse; this module collects
//! those edges into a bitset over the window's edge slots, runs union-find,
//! and answers the connectivity questions the estimators ask: one-arm events,
//! cluster extents with explicit censoring, and face-to-face crossings.

use crate::lattice::{BoundaryMode, Cube, Point, Window};
use crate::loop_model::Loop;
use crate::sampler::SoupRealization;
use crate::{Error, Result};

/// Open edges of one realization at one level, as a bitset over the
/// window's edge slots.
#[derive(Clone, Debug, PartialEq)]
pub struct OpenEdgeSet {
    bits: Vec<u64>,
    num_slots: usize,
    alpha: f64,
    master_seed: u64,
}

impl OpenEdgeSet {
    pub fn empty(window: &Window, alpha: f64, master_seed: u64) -> OpenEdgeSet {
        let num_slots = window.num_edge_slots();
        OpenEdgeSet {
            bits: vec![0; num_slots.div_ceil(64)],
            num_slots,
            alpha,
            master_seed,
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn set(&mut self, slot: usize) {
        debug_assert!(slot < self.num_slots);
        self.bits[slot / 64] |= 1u64 << (slot % 64);
    }

    pub fn is_open(&self, slot: usize) -> bool {
        self.bits[slot / 64] >> (slot % 64) & 1 == 1
    }

    pub fn count_open(&self) -> usize {
        self.bits.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter_open(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.num_slots).filter(move |&s| self.is_open(s))
    }

    pub fn is_subset_of(&self, other: &OpenEdgeSet) -> bool {
        self.num_slots == other.num_slots
            && self.bits.iter().zip(other.bits.iter()).all(|(a, b)| a & !b == 0)
    }

    /// Every valid slot open; the fully percolating reference state.
    pub fn full(window: &Window) -> OpenEdgeSet {
        let mut set = OpenEdgeSet::empty(window, f64::INFINITY, 0);
        for slot in 0..set.num_slots {
            if window.edge_endpoints(slot).is_some() {
                set.set(slot);
            }
        }
        set
    }
}

/// Mark the edges of one loop. Edges with an endpoint outside the window are
/// dropped: under the open boundary, loops run past the domain and only the
/// part inside is observed.
fn mark_loop(window: &Window, l: &Loop, set: &mut OpenEdgeSet) {
    for (a, b) in l.edges() {
        let (Some(ia), Some(ib)) = (window.index(a), window.index(b)) else {
            continue;
        };
        let slot = window
            .edge_between(ia, ib)
            .expect("consecutive loop points are lattice neighbors");
        set.set(slot);
    }
}

/// Union of traversed edges over the given loops.
pub fn open_edges_in<'a>(
    window: &Window,
    loops: impl Iterator<Item = &'a Loop>,
    alpha: f64,
    master_seed: u64,
) -> OpenEdgeSet {
    let mut set = OpenEdgeSet::empty(window, alpha, master_seed);
    for l in loops {
        mark_loop(window, l, &mut set);
    }
    set
}

/// Open edges of the realization restricted to level `alpha`.
pub fn open_edges(s: &SoupRealization, alpha: f64) -> Result<OpenEdgeSet> {
    if !(alpha >= 0.0) || alpha > s.alpha_max() {
        return Err(Error::Precondition(format!(
            "alpha {alpha} outside [0, {}]",
            s.alpha_max()
        )));
    }
    Ok(open_edges_in(s.window(), s.loops_at(alpha), alpha, s.master_seed()))
}

/// Union-find with path compression and union by size. Supports extra
/// virtual nodes beyond the site count (boundary supernodes and the like).
#[derive(Clone, Debug)]
pub struct UnionFind {
    parent: Vec<usize>,
    size: Vec<usize>,
}

impl UnionFind {
    pub fn new(n: usize) -> UnionFind {
        UnionFind {
            parent: (0..n).collect(),
            size: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Merge the components of a and b; false if they already shared one.
    pub fn union(&mut self, a: usize, b: usize) -> bool {
        let (mut ra, mut rb) = (self.find(a), self.find(b));
        if ra == rb {
            return false;
        }
        if self.size[ra] < self.size[rb] {
            std::mem::swap(&mut ra, &mut rb);
        }
        self.parent[rb] = ra;
        self.size[ra] += self.size[rb];
        true
    }

    pub fn connected(&mut self, a: usize, b: usize) -> bool {
        self.find(a) == self.find(b)
    }

    pub fn size_of(&mut self, x: usize) -> usize {
        let r = self.find(x);
        self.size[r]
    }
}

/// Connected components of the open subgraph, with deterministic labels:
/// every site is labeled by the minimal site index of its component.
#[derive(Clone, Debug)]
pub struct ClusterForest {
    window: Window,
    labels: Vec<usize>,
    sizes: Vec<usize>,
}

pub fn build_clusters(window: &Window, edges: &OpenEdgeSet) -> ClusterForest {
    let n = window.num_sites();
    let mut uf = UnionFind::new(n);
    for slot in edges.iter_open() {
        let (a, b) = window
            .edge_endpoints(slot)
            .expect("open slots address real edges");
        uf.union(a, b);
    }
    // Ascending pass: the first site to reach a root names the component.
    let mut first = vec![usize::MAX; n];
    let mut labels = vec![0usize; n];
    let mut sizes = vec![0usize; n];
    for i in 0..n {
        let r = uf.find(i);
        if first[r] == usize::MAX {
            first[r] = i;
        }
        labels[i] = first[r];
        sizes[first[r]] += 1;
    }
    ClusterForest {
        window: window.clone(),
        labels,
        sizes,
    }
}

impl ClusterForest {
    pub fn window(&self) -> &Window {
        &self.window
    }

    /// Component label of a site: the minimal site index in its component.
    pub fn label(&self, site: usize) -> usize {
        self.labels[site]
    }

    pub fn connected(&self, a: usize, b: usize) -> bool {
        self.labels[a] == self.labels[b]
    }

    pub fn size_of_site(&self, site: usize) -> usize {
        self.sizes[self.labels[site]]
    }

    pub fn num_sites(&self) -> usize {
        self.labels.len()
    }

    /// Sizes of the two largest components; the second is 0 when there is
    /// only one. The ratio is the usual uniqueness diagnostic.
    pub fn largest_two(&self) -> (usize, usize) {
        let mut best = 0usize;
        let mut second = 0usize;
        for (i, &s) in self.sizes.iter().enumerate() {
            if self.labels[i] != i {
                continue;
            }
            if s > best {
                second = best;
                best = s;
            } else if s > second {
                second = s;
            }
        }
        (best, second)
    }
}

/// Size, sup-norm radius around `origin`, and boundary censoring of the
/// component containing `origin`. When the component touches the window
/// shell, the true cluster may continue outside and size/radius are lower
/// bounds only.
pub fn finite_cluster_extent(f: &ClusterForest, origin: &Point) -> Result<(usize, i64, bool)> {
    let oi = f
        .window
        .index(origin)
        .ok_or_else(|| Error::Precondition(format!("origin {origin} not in window")))?;
    let label = f.labels[oi];
    let mut size = 0usize;
    let mut radius = 0i64;
    let mut censored = false;
    for i in 0..f.labels.len() {
        if f.labels[i] != label {
            continue;
        }
        size += 1;
        radius = radius.max(f.window.site(i).sup_dist(origin));
        if f.window.margin_of_index(i) == 0 {
            censored = true;
        }
    }
    Ok((size, radius, censored))
}

/// True iff the lattice origin connects to the boundary of B(n).
///
/// The margin rule keeps the finite window honest: with loops up to length
/// `cutoff`, anything touching B(n) stays inside B(n + cutoff/2), so the
/// window must contain that enlarged ball for the event to be the infinite-
/// volume one. Callers of window-sampled soups pass cutoff = the sampled
/// k_max and account for the reported tail separately.
pub fn one_arm(f: &ClusterForest, n: i64, cutoff: usize) -> Result<bool> {
    if n < 1 {
        return Err(Error::Precondition(format!("one-arm radius must be >= 1, got {n}")));
    }
    let d = f.window.dim();
    let origin = Point::origin(d);
    let oi = f
        .window
        .index(&origin)
        .ok_or_else(|| Error::Precondition("window does not contain the origin".into()))?;
    let needed = n + (cutoff / 2) as i64;
    let have = f.window.domain().margin_of(&origin);
    if have < needed {
        return Err(Error::Margin { needed, have });
    }
    let reach = Cube::new(origin.clone(), n);
    let label = f.labels[oi];
    for i in 0..f.labels.len() {
        if f.labels[i] == label && f.window.site(i).sup_dist(&origin) >= n {
            debug_assert!(!reach.contains(&f.window.site(i)) || f.window.site(i).sup_dist(&origin) == n);
            return Ok(true);
        }
    }
    Ok(false)
}

/// True iff some open path joins the window's two faces along `axis`.
pub fn crossing(f: &ClusterForest, axis: usize) -> Result<bool> {
    let d = f.window.dim();
    if axis >= d {
        return Err(Error::Precondition(format!("axis {axis} out of range for d = {d}")));
    }
    let lo = f.window.domain().lo().coord(axis);
    let hi = f.window.domain().hi().coord(axis);
    if lo == hi {
        // Degenerate: both faces are the same hyperplane.
        return Ok(true);
    }
    let n = f.labels.len();
    let mut on_lo = vec![false; n];
    for i in 0..n {
        let c = f.window.site_coord(i, axis);
        if c == lo {
            on_lo[f.labels[i]] = true;
        }
    }
    for i in 0..n {
        if f.window.site_coord(i, axis) == hi && on_lo[f.labels[i]] {
            return Ok(true);
        }
    }
    Ok(false)
}

/// Crossing between the two extent faces of a slab window (axis 0), the
/// event behind slab-threshold estimates.
pub fn slab_crossing(f: &ClusterForest) -> Result<bool> {
    if f.window.boundary() != BoundaryMode::Absorbing {
        return Err(Error::Precondition("slab crossings run on absorbing slab windows".into()));
    }
    crossing(f, 0)
}

/// One line of the cluster summary table.
#[derive(Clone, Debug)]
pub struct ClusterSummaryRow {
    pub replica: u64,
    pub alpha: f64,
    pub n: i64,
    pub one_arm: bool,
    pub c0_size: usize,
    pub c0_radius: i64,
    pub censored: bool,
    pub largest: usize,
    pub second_largest: usize,
}

impl ClusterSummaryRow {
    pub const CSV_HEADER: &'static str =
        "replica,alpha,n,one_arm,c0_size,c0_radius,censored,largest,second_largest";

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.replica,
            self.alpha,
            self.n,
            self.one_arm as u8,
            self.c0_size,
            self.c0_radius,
            self.censored as u8,
            self.largest,
            self.second_largest
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::BoundaryMode;
    use crate::loop_model::{Intensity, MassTable};
    use crate::sampler::sample_truncated;

    fn p(c: &[i64]) -> Point {
        Point::new(c)
    }

    fn edge_loop() -> Loop {
        Loop::from_points(vec![p(&[0, 0, 0]), p(&[1, 0, 0])]).unwrap()
    }

    #[test]
    fn empty_soup_gives_singletons() {
        let w = Window::cube(3, 2, BoundaryMode::Absorbing, 0.0).unwrap();
        let set = open_edges_in(&w, std::iter::empty(), 1.0, 0);
        assert_eq!(set.count_open(), 0);
        let f = build_clusters(&w, &set);
        assert!((0..w.num_sites()).all(|i| f.size_of_site(i) == 1));
        assert_eq!(f.largest_two(), (1, 1));
        let (size, radius, censored) = finite_cluster_extent(&f, &p(&[0, 0, 0])).unwrap();
        assert_eq!((size, radius, censored), (1, 0, false));
    }

    #[test]
    fn single_edge_loop_opens_one_edge() {
        let w = Window::cube(3, 4, BoundaryMode::Absorbing, 0.0).unwrap();
        let l = edge_loop();
        let set = open_edges_in(&w, std::iter::once(&l), 1.0, 0);
        assert_eq!(set.count_open(), 1);
        let f = build_clusters(&w, &set);
        let a = w.index(&p(&[0, 0, 0])).unwrap();
        let b = w.index(&p(&[1, 0, 0])).unwrap();
        assert!(f.connected(a, b));
        assert_eq!(f.size_of_site(a), 2);
        assert_eq!(f.label(a), f.label(b));
        assert_eq!(f.label(a), a.min(b));
        let (size, radius, censored) = finite_cluster_extent(&f, &p(&[0, 0, 0])).unwrap();
        assert_eq!((size, radius, censored), (2, 1, false));
        // The pair reaches B(1)'s shell but not B(2)'s.
        assert!(one_arm(&f, 1, 2).unwrap());
        assert!(!one_arm(&f, 2, 2).unwrap());
    }

    #[test]
    fn fully_open_window_is_one_component() {
        let w = Window::cube(3, 2, BoundaryMode::Absorbing, 0.0).unwrap();
        let f = build_clusters(&w, &OpenEdgeSet::full(&w));
        assert_eq!(f.size_of_site(0), 125);
        assert_eq!(f.largest_two(), (125, 0));
        let (_, radius, censored) = finite_cluster_extent(&f, &p(&[0, 0, 0])).unwrap();
        assert_eq!(radius, 2);
        assert!(censored);
        assert!(one_arm(&f, 2, 0).unwrap());
        assert!(crossing(&f, 0).unwrap());
    }

    #[test]
    fn open_edges_monotone_in_alpha() {
        let w = Window::cube(3, 3, BoundaryMode::Absorbing, 0.0).unwrap();
        let table = MassTable::build(&w, 4).unwrap();
        let intensity = Intensity::truncated(30.0, 0.0, 4);
        let s = sample_truncated(&w, &table, &intensity, 30.0, 41, 0).unwrap();
        let lo = open_edges(&s, 10.0).unwrap();
        let hi = open_edges(&s, 30.0).unwrap();
        assert!(lo.is_subset_of(&hi));
        assert!(lo.count_open() < hi.count_open(), "want strictness at these levels");
        // One-arm events inherit the monotonicity deterministically.
        let f_lo = build_clusters(&w, &lo);
        let f_hi = build_clusters(&w, &hi);
        if one_arm(&f_lo, 1, 4).unwrap() {
            assert!(one_arm(&f_hi, 1, 4).unwrap());
        }
    }

    #[test]
    fn union_find_matches_bfs_components() {
        let w = Window::cube(3, 3, BoundaryMode::Absorbing, 0.0).unwrap();
        let table = MassTable::build(&w, 4).unwrap();
        let intensity = Intensity::truncated(40.0, 0.0, 4);
        for r in 0..20 {
            let s = sample_truncated(&w, &table, &intensity, 40.0, 43, r).unwrap();
            let set = open_edges(&s, 40.0).unwrap();
            let f = build_clusters(&w, &set);
            // Breadth-first reference labeling over the same open subgraph.
            let n = w.num_sites();
            let mut bfs_label = vec![usize::MAX; n];
            for start in 0..n {
                if bfs_label[start] != usize::MAX {
                    continue;
                }
                bfs_label[start] = start;
                let mut queue = std::collections::VecDeque::from([start]);
                while let Some(x) = queue.pop_front() {
                    for axis in 0..3 {
                        for dir in [-1i64, 1] {
                            let Some(y) = w.neighbor(x, axis, dir) else { continue };
                            let slot = w.edge_between(x, y).unwrap();
                            if set.is_open(slot) && bfs_label[y] == usize::MAX {
                                bfs_label[y] = start;
                                queue.push_back(y);
                            }
                        }
                    }
                }
            }
            for i in 0..n {
                assert_eq!(f.label(i), bfs_label[i], "site {i} in replica {r}");
            }
        }
    }

    #[test]
    fn censoring_flags_are_sound_under_window_growth() {
        // The absorbing soup on the big window, filtered to loops inside the
        // small domain, is exactly the small window's soup. Wherever the
        // small forest reports an uncensored cluster, the big forest must
        // agree on size and radius.
        let big = Window::cube(3, 6, BoundaryMode::Absorbing, 0.0).unwrap();
        let small = Window::cube(3, 4, BoundaryMode::Absorbing, 0.0).unwrap();
        let table = MassTable::build(&big, 4).unwrap();
        let intensity = Intensity::truncated(4.0, 0.0, 4);
        let mut uncensored_seen = 0;
        for r in 0..40 {
            let s = sample_truncated(&big, &table, &intensity, 4.0, 47, r).unwrap();
            let big_set = open_edges(&s, 4.0).unwrap();
            let small_set = open_edges_in(
                &small,
                s.loops_at(4.0).filter(|l| l.contained_in(small.domain())),
                4.0,
                s.master_seed(),
            );
            let f_big = build_clusters(&big, &big_set);
            let f_small = build_clusters(&small, &small_set);
            for probe in [p(&[0, 0, 0]), p(&[1, 1, 0]), p(&[-2, 0, 2])] {
                let (size_s, radius_s, censored_s) =
                    finite_cluster_extent(&f_small, &probe).unwrap();
                if censored_s {
                    continue;
                }
                uncensored_seen += 1;
                // Loops meeting an uncensored small-window cluster never
                // reach the small boundary, hence exist in both soups; the
                // cluster is identical in the big window.
                let (size_b, radius_b, _) = finite_cluster_extent(&f_big, &probe).unwrap();
                assert_eq!((size_s, radius_s), (size_b, radius_b), "replica {r} at {probe}");
            }
        }
        assert!(uncensored_seen > 50, "test exercised {uncensored_seen} clusters only");
    }

    #[test]
    fn slab_crossing_end_to_end() {
        let w = Window::slab(3, 6, 2, 0.0).unwrap();
        let empty = open_edges_in(&w, std::iter::empty(), 0.0, 0);
        assert!(!slab_crossing(&build_clusters(&w, &empty)).unwrap());
        let full = build_clusters(&w, &OpenEdgeSet::full(&w));
        assert!(slab_crossing(&full).unwrap());
    }

    #[test]
    fn margin_rule_rejects_small_windows() {
        let w = Window::cube(3, 3, BoundaryMode::Absorbing, 0.0).unwrap();
        let f = build_clusters(&w, &OpenEdgeSet::empty(&w, 0.0, 0));
        // Radius 2 with cutoff 4 needs margin 4 > 3.
        let err = one_arm(&f, 2, 4);
        assert!(matches!(err, Err(Error::Margin { needed: 4, have: 3 })));
        assert!(one_arm(&f, 1, 4).is_ok());
    }

    #[test]
    fn csv_row_layout_is_stable() {
        let row = ClusterSummaryRow {
            replica: 3,
            alpha: 1.5,
            n: 8,
            one_arm: true,
            c0_size: 12,
            c0_radius: 4,
            censored: false,
            largest: 20,
            second_largest: 12,
        };
        assert_eq!(ClusterSummaryRow::CSV_HEADER.split(',').count(), 9);
        assert_eq!(row.to_csv(), "3,1.5,8,1,12,4,0,20,12");
    }
}
