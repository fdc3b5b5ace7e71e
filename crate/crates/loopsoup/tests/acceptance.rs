//! The acceptance gate: ten end-to-end checks tying the exact oracle, the
//! samplers, the estimators and the multiscale machinery together.
//!
//! Every check prints one verdict line (`criterion N: PASS/FAIL - detail`)
//! straight to stderr, bypassing libtest capture, so a full run reads as a
//! checklist even without --nocapture. Tolerances and replica budgets are
//! pinned here as constants; the fixed seeds make every verdict
//! reproducible bit for bit.
//!
//! Two checks currently read FAIL and are expected to. Criterion 6's first
//! half asks for a tail fit over radii 4..=12 at twice the pair-soup
//! threshold, where the finite-cluster one-arm probability has already
//! dropped below 1e-4 at radius 4 and decays like exp(-2.1 n) onward;
//! resolving radius 8 alone would take ~1e8 replicas (weeks on one core).
//! Criterion 9 pins the annulus mass ratio at 2^-(d-2), but the measured
//! decay exponent of the crossing mass is d itself (ratio ~ 0.15, some 40
//! sigma from the pinned band). Both tests run their measurement faithfully
//! and report what they saw.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write as _;
use std::sync::OnceLock;
use std::time::Instant;

use loopsoup::clusters::{build_clusters, finite_cluster_extent, open_edges};
use loopsoup::estimators::{
    chi_square_p_value, find_threshold, kappa_c_curve, ols_line, tail_fit,
    theta_truncation_gaps, ThresholdBracket, ThresholdModel,
};
use loopsoup::lattice::{BoundaryMode, Cube, Cuboid, Point, Window};
use loopsoup::loop_model::{Intensity, Loop, MassTable};
use loopsoup::multiscale::{
    build_frame, check_block_event, check_regular_ball, classify_good, GoodnessField, IsoMode,
    ScaleSequence, SiteGraph,
};
use loopsoup::oracle::{closed_probability, corpus, exact_theta, mass_series, total_mass};
use loopsoup::sampler::{connection_mass_mc, sample_truncated, sample_window, SoupRealization};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// Write directly to the stderr file descriptor; the print macros are
/// captured per test thread, a raw handle is not.
fn raw_stderr(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
}

fn verdict(idx: usize, pass: bool, detail: &str) {
    let line = format!("criterion {idx}: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    raw_stderr(&line);
    assert!(pass, "{line}");
}

fn p(coords: &[i64]) -> Point {
    Point::new(coords)
}

// ---------------------------------------------------------------- shared

const THRESHOLD_SCALE: i64 = 16;
const THRESHOLD_TOL: f64 = 0.4;
const THRESHOLD_REPLICAS: usize = 250;
const THRESHOLD_MAX_REPLICAS: usize = 1000;
const THRESHOLD_SEED: u64 = 0xAC04;

static PAIR_BRACKET: OnceLock<ThresholdBracket> = OnceLock::new();

/// Bracket for the pair-soup (m = 2) bulk threshold, shared by the checks
/// that pin their intensity to a multiple of it. Computed once; criterion 4
/// asserts its quality, the others only read the midpoint.
fn pair_bracket() -> &'static ThresholdBracket {
    PAIR_BRACKET.get_or_init(|| {
        find_threshold(
            3,
            &ThresholdModel::Bulk { m: 2 },
            0.0,
            THRESHOLD_SCALE,
            0.5,
            THRESHOLD_TOL,
            THRESHOLD_REPLICAS,
            THRESHOLD_MAX_REPLICAS,
            THRESHOLD_SEED,
        )
        .expect("pair-soup threshold search")
    })
}

fn bracket_mid(b: &ThresholdBracket) -> f64 {
    0.5 * (b.lo + b.hi)
}

// ------------------------------------------------------------ criterion 1

#[test]
fn c01_oracle_identities() {
    let t0 = Instant::now();
    let series_len = 64;
    let mut worst: f64 = 0.0;
    for (name, w) in corpus() {
        let exact = total_mass(&w).unwrap();
        let (series, _) = mass_series(&w, series_len);
        let gap = (exact - series).abs();
        assert!(
            gap <= 1e-10,
            "log-det vs trace series disagree on {name}: {exact} vs {series}"
        );
        worst = worst.max(gap);
    }

    let (_, path) = corpus()
        .into_iter()
        .find(|(name, _)| name == "three-site-path")
        .expect("corpus has the three-site path");
    // The two path endpoints are the unique pair at sup-distance 2.
    let sites = path.sites().to_vec();
    let a = sites.iter().find(|s| s.sup_norm() == 0).unwrap().clone();
    let c = sites.iter().max_by_key(|s| s.sup_norm()).unwrap().clone();
    let theta = exact_theta(&path, &a, &[c], 1.0).unwrap();
    let target = 1.0 / 630.0;
    let theta_gap = (theta - target).abs();
    let elapsed = t0.elapsed();

    let pass = worst <= 1e-10 && theta_gap <= 1e-12 && elapsed.as_secs_f64() < 1.0;
    verdict(
        1,
        pass,
        &format!(
            "series gap max {worst:.2e}, endpoint connectivity off by {theta_gap:.2e}, {elapsed:?}"
        ),
    );
}

// ------------------------------------------------------------ criterion 2

/// Truncated sampler against the exact oracle on every boxy corpus window:
/// per-edge closure frequencies and one endpoint-to-endpoint connectivity,
/// each within three binomial standard errors of the exact value.
#[test]
fn c02_sampler_matches_oracle() {
    let t0 = Instant::now();
    let replicas: usize = 10_000;
    let alpha = 1.0;
    let m = 12;
    let seed = 0xAC02;

    let mut windows_used = 0;
    let mut comparisons = 0;
    let mut max_z: f64 = 0.0;

    for (name, w) in corpus() {
        let sites = w.sites().to_vec();
        let lo: Vec<i64> =
            (0..3).map(|ax| sites.iter().map(|s| s.coord(ax)).min().unwrap()).collect();
        let hi: Vec<i64> =
            (0..3).map(|ax| sites.iter().map(|s| s.coord(ax)).max().unwrap()).collect();
        let hull = Cuboid::new(p(&lo), p(&hi)).unwrap();
        if hull.num_sites() != sites.len() as u128 {
            // Not a box (the tromino); the sampler window cannot take that
            // shape, the oracle covers it elsewhere.
            continue;
        }
        windows_used += 1;

        let win = Window::new(hull, BoundaryMode::Absorbing, w.kappa()).unwrap();
        let table = MassTable::build(&win, m).unwrap();
        let intensity = Intensity::truncated(alpha, w.kappa(), m);

        // Endpoint pair for the connectivity check: the farthest two sites.
        let (mut pi, mut pj, mut best) = (0, 0, -1i64);
        for i in 0..sites.len() {
            for j in (i + 1)..sites.len() {
                let dist = sites[i].sup_dist(&sites[j]);
                if dist > best {
                    (pi, pj, best) = (i, j, dist);
                }
            }
        }
        let oi = win.index(&sites[pi]).unwrap();
        let oj = win.index(&sites[pj]).unwrap();

        let slots: Vec<usize> = w
            .edges()
            .iter()
            .map(|&(a, b)| {
                let ia = win.index(&sites[a]).unwrap();
                let ib = win.index(&sites[b]).unwrap();
                win.edge_between(ia, ib).unwrap()
            })
            .collect();

        let mut open_counts = vec![0usize; slots.len()];
        let mut connected_count = 0usize;
        for r in 0..replicas as u64 {
            let s = sample_truncated(&win, &table, &intensity, alpha, seed, r).unwrap();
            let edges = open_edges(&s, alpha).unwrap();
            for (k, &slot) in slots.iter().enumerate() {
                if edges.is_open(slot) {
                    open_counts[k] += 1;
                }
            }
            let forest = build_clusters(&win, &edges);
            if forest.connected(oi, oj) {
                connected_count += 1;
            }
        }

        let n = replicas as f64;
        for (k, &count) in open_counts.iter().enumerate() {
            let p_closed = closed_probability(&w, &[k], alpha).unwrap();
            let freq_closed = 1.0 - count as f64 / n;
            let stderr = (p_closed * (1.0 - p_closed) / n).sqrt();
            let z = (freq_closed - p_closed).abs() / stderr;
            max_z = max_z.max(z);
            comparisons += 1;
            assert!(
                z <= 3.0,
                "{name} edge {k}: closed freq {freq_closed:.5} vs exact {p_closed:.5} (z = {z:.2})"
            );
        }

        let p_conn = exact_theta(&w, &sites[pi], &[sites[pj].clone()], alpha).unwrap();
        let freq_conn = connected_count as f64 / n;
        let stderr = (p_conn * (1.0 - p_conn) / n).sqrt();
        let z = (freq_conn - p_conn).abs() / stderr;
        max_z = max_z.max(z);
        comparisons += 1;
        assert!(
            z <= 3.0,
            "{name} connectivity: freq {freq_conn:.5} vs exact {p_conn:.5} (z = {z:.2})"
        );
    }

    let elapsed = t0.elapsed();
    let pass = windows_used >= 5 && elapsed.as_secs_f64() < 60.0;
    verdict(
        2,
        pass,
        &format!(
            "{windows_used} windows, {comparisons} frequency checks, max |z| {max_z:.2}, {elapsed:?}"
        ),
    );
}

// ------------------------------------------------------------ criterion 3

/// The pair soup opens each edge independently with p = 1 - exp(-alpha/36).
/// Pooled marginals within three standard errors, and every pair of the 54
/// interior edge indicators passes a chi-square independence test after
/// Bonferroni correction.
#[test]
fn c03_pair_soup_is_bernoulli() {
    let alphas = [2.0, 6.0, 12.0];
    let replicas: usize = 10_000;
    let seed = 0xAC03;

    let hull = Cuboid::new(p(&[-1, -1, -1]), p(&[1, 1, 1])).unwrap();
    let win = Window::new(hull, BoundaryMode::Absorbing, 0.0).unwrap();
    let table = MassTable::build(&win, 2).unwrap();
    let slots: Vec<usize> =
        (0..win.num_edge_slots()).filter(|&s| win.edge_endpoints(s).is_some()).collect();
    let words = replicas.div_ceil(64);

    let mut total_tests = 0usize;
    let mut max_stat: f64 = 0.0;
    let mut max_marginal_z: f64 = 0.0;

    for &alpha in &alphas {
        let intensity = Intensity::truncated(alpha, 0.0, 2);
        let mut columns = vec![vec![0u64; words]; slots.len()];
        for r in 0..replicas {
            let s = sample_truncated(&win, &table, &intensity, alpha, seed, r as u64).unwrap();
            let edges = open_edges(&s, alpha).unwrap();
            for (k, &slot) in slots.iter().enumerate() {
                if edges.is_open(slot) {
                    columns[k][r / 64] |= 1 << (r % 64);
                }
            }
        }

        let ones: Vec<usize> =
            columns.iter().map(|c| c.iter().map(|w| w.count_ones() as usize).sum()).collect();

        let p_edge = 1.0 - (-alpha / 36.0).exp();
        let pooled = ones.iter().sum::<usize>() as f64 / (replicas * slots.len()) as f64;
        let pooled_stderr = (p_edge * (1.0 - p_edge) / (replicas * slots.len()) as f64).sqrt();
        let z = (pooled - p_edge).abs() / pooled_stderr;
        max_marginal_z = max_marginal_z.max(z);
        assert!(
            z <= 3.0,
            "marginal off at alpha {alpha}: pooled {pooled:.5} vs {p_edge:.5} (z = {z:.2})"
        );

        let n = replicas as f64;
        for i in 0..slots.len() {
            for j in (i + 1)..slots.len() {
                let n11 = columns[i]
                    .iter()
                    .zip(&columns[j])
                    .map(|(a, b)| (a & b).count_ones() as usize)
                    .sum::<usize>() as f64;
                let r1 = ones[i] as f64;
                let c1 = ones[j] as f64;
                let (a, b, c, dd) = (n11, r1 - n11, c1 - n11, n - r1 - c1 + n11);
                let denom = r1 * (n - r1) * c1 * (n - c1);
                assert!(denom > 0.0, "degenerate margin for pair ({i}, {j})");
                let stat = n * (a * dd - b * c).powi(2) / denom;
                max_stat = max_stat.max(stat);
                total_tests += 1;
            }
        }
    }

    // Bonferroni over every pair at every intensity: the smallest p-value
    // is the one belonging to the largest statistic.
    let p_min = chi_square_p_value(max_stat, 1.0).unwrap();
    let corrected = p_min * total_tests as f64;
    let pass = corrected > 0.01;
    verdict(
        3,
        pass,
        &format!(
            "marginal max |z| {max_marginal_z:.2}, {total_tests} pair tests, \
             min corrected p {corrected:.3}"
        ),
    );
}

// ------------------------------------------------------------ criterion 4

/// Adding lengths 3 and 4 to the soup strictly lowers the percolation
/// threshold: the m = 4 bracket sits entirely below the m = 2 bracket on a
/// paired-seed crossing search at scale 16.
#[test]
fn c04_quad_threshold_below_pair_threshold() {
    let t0 = Instant::now();
    let b2 = pair_bracket();
    let b4 = find_threshold(
        3,
        &ThresholdModel::Bulk { m: 4 },
        0.0,
        THRESHOLD_SCALE,
        0.5,
        THRESHOLD_TOL,
        THRESHOLD_REPLICAS,
        THRESHOLD_MAX_REPLICAS,
        THRESHOLD_SEED,
    )
    .unwrap();
    let elapsed = t0.elapsed();

    let pass =
        b2.resolved && b4.resolved && b4.hi < b2.lo && elapsed.as_secs() <= 30 * 60;
    verdict(
        4,
        pass,
        &format!(
            "m=2 bracket [{:.2}, {:.2}], m=4 bracket [{:.2}, {:.2}], {elapsed:?}",
            b2.lo, b2.hi, b4.lo, b4.hi
        ),
    );
}

// ------------------------------------------------------------ criterion 5

/// Threshold trends, compared bracket to bracket so statistical ties are
/// not failures: slab thresholds non-increasing in the slab width, bulk
/// thresholds non-increasing in the length cutoff.
#[test]
fn c05_threshold_trends() {
    let t0 = Instant::now();
    let n = 12;
    let tol = 0.5;
    let seed = 0xAC05;

    let run = |model: ThresholdModel| {
        find_threshold(3, &model, 0.0, n, 0.5, tol, 200, 800, seed).unwrap()
    };

    let slabs: Vec<ThresholdBracket> =
        [2i64, 4, 8].iter().map(|&w| run(ThresholdModel::Slab { m: 2, width: w })).collect();
    let bulks: Vec<ThresholdBracket> =
        [2usize, 4, 8].iter().map(|&m| run(ThresholdModel::Bulk { m })).collect();

    let mut ok = true;
    let mut notes = Vec::new();
    for pair in slabs.windows(2) {
        if !(pair[0].resolved && pair[1].resolved) {
            ok = false;
            notes.push("unresolved slab bracket".to_string());
        }
        if pair[1].lo > pair[0].hi {
            ok = false;
            notes.push(format!(
                "slab increase: [{:.2},{:.2}] then [{:.2},{:.2}]",
                pair[0].lo, pair[0].hi, pair[1].lo, pair[1].hi
            ));
        }
    }
    for pair in bulks.windows(2) {
        if !(pair[0].resolved && pair[1].resolved) {
            ok = false;
            notes.push("unresolved bulk bracket".to_string());
        }
        if pair[1].lo > pair[0].hi {
            ok = false;
            notes.push(format!(
                "bulk increase: [{:.2},{:.2}] then [{:.2},{:.2}]",
                pair[0].lo, pair[0].hi, pair[1].lo, pair[1].hi
            ));
        }
    }

    let fmt = |b: &ThresholdBracket| format!("[{:.2},{:.2}]", b.lo, b.hi);
    let detail = format!(
        "slab widths 2,4,8: {} {} {}; bulk m 2,4,8: {} {} {}{} ({:?})",
        fmt(&slabs[0]),
        fmt(&slabs[1]),
        fmt(&slabs[2]),
        fmt(&bulks[0]),
        fmt(&bulks[1]),
        fmt(&bulks[2]),
        if notes.is_empty() { String::new() } else { format!("; {}", notes.join("; ")) },
        t0.elapsed()
    );
    verdict(5, ok, &detail);
}

// ------------------------------------------------------------ criterion 6

/// Deep in the supercritical pair soup the finite-cluster one-arm
/// probability should fit a clean exponential over radii 4..=12, and the
/// subcritical full soup should visibly flatten under the same diagnostic.
///
/// The first half is measured faithfully and fails: at twice the threshold
/// the probability is ~1e-4 at radius 4 already and falls ~8x per radius
/// (Wulff-type suppression), so no desk-scale replica budget puts ten
/// successes on five radii. The pinned 10^4 replicas document the emptiness.
#[test]
fn c06_supercritical_tail_and_subcritical_flattening() {
    let radii: Vec<i64> = (4..=12).collect();

    // Supercritical half, at twice the pair-threshold midpoint.
    let alpha_super = 2.0 * bracket_mid(pair_bracket());
    let fit = tail_fit(3, alpha_super, 0.0, 2, &radii, 10_000, 0xAC06).unwrap();
    let super_ok = !fit.inconclusive
        && fit.slope.is_some_and(|s| s < 0.0)
        && fit.r_squared.is_some_and(|r| r >= 0.9);

    // Subcritical half: full-soup window sampling with the length cutoff
    // pushed to 2048, one shared soup per replica, reach read off the
    // origin cluster. Short open paths carry the arm at small radii and
    // die exponentially; past radius ~5 a single long loop through the
    // cluster carries it, and that mass only decays polynomially. The
    // head fit is therefore visibly steeper than the tail fit.
    let radii_sub: Vec<i64> = (2..=12).collect();
    let alpha_sub = 1.0;
    let k_max = 2048;
    let sub_replicas: usize = 6_000;
    let ambient = Window::cube(3, 28, BoundaryMode::OpenWithTailCutoff, 0.0).unwrap();
    let base = Cube::around_origin(3, 12).to_cuboid();
    let origin = Point::origin(3);
    let mut counts = vec![0usize; radii_sub.len()];
    for r in 0..sub_replicas as u64 {
        let s = sample_window(&ambient, &base, alpha_sub, k_max, 0xAC06 + 1, r).unwrap();
        let edges = open_edges(&s, alpha_sub).unwrap();
        let forest = build_clusters(&ambient, &edges);
        let (_, reach, _) = finite_cluster_extent(&forest, &origin).unwrap();
        for (i, &n) in radii_sub.iter().enumerate() {
            if reach >= n {
                counts[i] += 1;
            }
        }
    }
    let usable: Vec<(f64, f64)> = radii_sub
        .iter()
        .zip(&counts)
        .filter(|(_, &c)| c >= 10)
        .map(|(&n, &c)| (n as f64, (c as f64 / sub_replicas as f64).ln()))
        .collect();
    // Flattening gate: the tail slope must recover at least half of the
    // head slope and sit at least 0.1 above it. Both margins hold with
    // several standard errors of room at this replica count.
    let (sub_ok, head_slope, tail_slope) = if usable.len() >= 8 {
        let head: (Vec<f64>, Vec<f64>) = usable[..3].iter().copied().unzip();
        let tail: (Vec<f64>, Vec<f64>) = usable[usable.len() - 3..].iter().copied().unzip();
        let hs = ols_line(&head.0, &head.1).unwrap().slope;
        let ts = ols_line(&tail.0, &tail.1).unwrap().slope;
        (hs < 0.0 && ts >= 0.5 * hs && ts - hs >= 0.1, hs, ts)
    } else {
        (false, f64::NAN, f64::NAN)
    };

    let pass = super_ok && sub_ok;
    verdict(
        6,
        pass,
        &format!(
            "supercritical fit at alpha {alpha_super:.1}: counts {:?}, inconclusive {}, \
             slope {:?}; subcritical at alpha {alpha_sub}: counts {counts:?}, \
             head slope {head_slope:.2}, tail slope {tail_slope:.2} (flattening ok: {sub_ok})",
            fit.counts, fit.inconclusive, fit.slope
        ),
    );
}

// ------------------------------------------------------------ criterion 7

/// Truncation gaps on shared realizations: keeping more loop lengths can
/// only move the one-arm estimate toward the full-soup value, and at the
/// top cutoff the gap is exactly zero.
#[test]
fn c07_truncation_gaps_shrink_to_zero() {
    let cutoffs = [2usize, 4, 6, 8];
    let gaps = theta_truncation_gaps(3, 12.0, 0.0, 3, &cutoffs, 400, 0xAC07).unwrap();
    let values: Vec<f64> = gaps.iter().map(|(_, e)| e.value).collect();

    let monotone = values.windows(2).all(|w| w[1] <= w[0]);
    let ends_at_zero = *values.last().unwrap() == 0.0;
    let nontrivial = values[0] > 0.0;
    let pass = monotone && ends_at_zero && nontrivial;
    verdict(
        7,
        pass,
        &format!("gaps at cutoffs {cutoffs:?}: {values:?} (monotone {monotone}, final zero {ends_at_zero})"),
    );
}

// ------------------------------------------------------------ criterion 8

/// The killing threshold is zero below the intensity threshold and
/// strictly positive above it.
#[test]
fn c08_killing_threshold_shape() {
    let t0 = Instant::now();
    let mid = bracket_mid(pair_bracket());
    let alphas = [0.5 * mid, 1.5 * mid];
    let tol = 0.05;
    let curve = kappa_c_curve(3, &alphas, 2, 8, 0.5, tol, 400, 3200, 0xAC08).unwrap();

    let below = &curve[0].1;
    let above = &curve[1].1;
    let below_ok = below.resolved && below.lo == 0.0 && below.hi <= tol + 1e-12;
    // The bracket floor only ever advances onto levels where the probe CI
    // sat entirely above the crossing criterion, so lo > 0 is itself the
    // CI-separation from zero. The bisection may still stop wide when the
    // mid probe lands statistically on the crossing point; that affects the
    // width, which this check does not pin.
    let above_ok = above.lo > 0.0;
    let pass = below_ok && above_ok;
    verdict(
        8,
        pass,
        &format!(
            "kappa (alpha {:.1}) in [{:.3}, {:.3}], kappa (alpha {:.1}) in [{:.3}, {:.3}] ({:?})",
            alphas[0],
            below.lo,
            below.hi,
            alphas[1],
            above.lo,
            above.hi,
            t0.elapsed()
        ),
    );
}

// ------------------------------------------------------------ criterion 9

/// Annulus-crossing mass ratio between shell radii 2N and 4N for N = 4,
/// pinned at 2^-(d-2) = 1/2 within 25 percent.
///
/// Measured faithfully and fails: on shared realizations the crossing mass
/// decays with exponent d (not d - 2, which only bounds it from above), so
/// the ratio lands near 0.13. The detail line carries the measurement.
#[test]
fn c09_annulus_connection_scaling() {
    let n = 4i64;
    let replicas = 3000u64;
    let seed = 0xAC09;
    let ambient = Window::cube(3, n, BoundaryMode::OpenWithTailCutoff, 0.0).unwrap();
    let base = Cube::around_origin(3, n).to_cuboid();
    let meets_base = |l: &Loop| l.points().iter().any(|q| q.sup_norm() <= n);
    let reaches = |m: i64| move |l: &Loop| l.points().iter().any(|q| q.sup_norm() >= m);

    // Same seed on both runs: the second measurement reuses the identical
    // soups, so the ratio is a within-realization count ratio.
    let inner =
        connection_mass_mc(&ambient, &base, 2048, replicas, seed, meets_base, reaches(2 * n))
            .unwrap();
    let outer =
        connection_mass_mc(&ambient, &base, 2048, replicas, seed, meets_base, reaches(4 * n))
            .unwrap();

    let ratio = outer.value / inner.value;
    let rel_err = ((outer.stderr / outer.value).powi(2) + (inner.stderr / inner.value).powi(2))
        .sqrt()
        * ratio;
    let exponent = (inner.value / outer.value).ln() / 2f64.ln();
    let pass = (0.375..=0.625).contains(&ratio);
    verdict(
        9,
        pass,
        &format!(
            "mass(2N) {:.3}, mass(4N) {:.3}, ratio {ratio:.3} +- {rel_err:.3} \
             (decay exponent {exponent:.2}, pinned band [0.375, 0.625])",
            inner.value, outer.value
        ),
    );
}

// ----------------------------------------------------------- criterion 10

/// Every edge of the window carried by its own two-step loop.
fn fully_open(window: &Window, alpha: f64) -> SoupRealization {
    let mut entries = Vec::new();
    for slot in 0..window.num_edge_slots() {
        if let Some((a, b)) = window.edge_endpoints(slot) {
            let l = Loop::from_points(vec![window.site(a), window.site(b)]).unwrap();
            entries.push((0.0, l));
        }
    }
    SoupRealization::from_parts(window.clone(), entries, alpha, 0.0, 0, vec![]).unwrap()
}

/// Minimum expansion over all nonempty subsets of the ball of radius `r`
/// around `center` with at most half the candidate sites, counting edges
/// that leave the subset inside the induced ball subgraph. Written from the
/// definition, as a check on the library's enumeration.
fn brute_min_expansion(g: &SiteGraph, center: usize, r: i64) -> Option<f64> {
    // Ball by breadth-first layers.
    let mut dist = vec![u32::MAX; g.num_sites()];
    let mut queue = std::collections::VecDeque::from([center]);
    dist[center] = 0;
    while let Some(x) = queue.pop_front() {
        for &y in g.neighbors(x) {
            if dist[y] == u32::MAX {
                dist[y] = dist[x] + 1;
                queue.push_back(y);
            }
        }
    }
    let ball: Vec<usize> =
        (0..g.num_sites()).filter(|&i| dist[i] != u32::MAX && dist[i] as i64 <= r).collect();
    let nc = ball.len();
    let position: BTreeMap<usize, usize> = ball.iter().enumerate().map(|(k, &i)| (i, k)).collect();

    let mut best: Option<f64> = None;
    for mask in 1u32..(1 << nc) {
        let size = mask.count_ones() as usize;
        if 2 * size > nc {
            continue;
        }
        let mut leaving = 0usize;
        for (k, &site) in ball.iter().enumerate() {
            if mask >> k & 1 == 0 {
                continue;
            }
            for &nb in g.neighbors(site) {
                if let Some(&kb) = position.get(&nb) {
                    if mask >> kb & 1 == 0 {
                        leaving += 1;
                    }
                }
            }
        }
        let ratio = leaving as f64 / size as f64;
        best = Some(best.map_or(ratio, |b: f64| b.min(ratio)));
    }
    best
}

#[test]
fn c10_multiscale_structure() {
    // Fully open soup: every vertex good at both levels, nothing removed
    // from the frame, the block event holds outright.
    let scales = ScaleSequence::new(2, 1, 2).unwrap();
    let win = Window::new(
        Cuboid::new(p(&[-12, -12, -12]), p(&[15, 15, 15])).unwrap(),
        BoundaryMode::Absorbing,
        0.0,
    )
    .unwrap();
    let s = fully_open(&win, 1.0);
    let block = Cuboid::new(p(&[-8, -8, -8]), p(&[11, 11, 11])).unwrap();
    let field = classify_good(&s, &scales, 1.0, &block, 1).unwrap();
    assert!(field.all_good(0) && field.all_good(1), "open soup must classify good");
    let frame = build_frame(&field, 1, 1, &p(&[0, 0, 0])).unwrap();
    assert_eq!(frame.len(), 1000, "full frame over the 20^3 block grid");
    let report = check_block_event(&s, 2, &scales, 1, 1, 1.0, 1.0).unwrap();
    assert!(
        report.a && report.b && report.c && report.holds,
        "block event must hold on the open soup"
    );

    // Recursion and frame monotonicity on synthetic goodness fields:
    // flipping one bad vertex to good never degrades any level and never
    // shrinks the frame.
    let mut rng = StdRng::seed_from_u64(0xAC10);
    let region = Cuboid::new(p(&[0, 0, 0]), p(&[31, 31, 31])).unwrap();
    let grid: Vec<Point> = {
        let mut out = Vec::new();
        for x in (0..32).step_by(2) {
            for y in (0..32).step_by(2) {
                for z in (0..32).step_by(2) {
                    out.push(p(&[x, y, z]));
                }
            }
        }
        out
    };
    let mut flip_trials = 0;
    for _ in 0..30 {
        let level0: BTreeMap<Vec<i64>, bool> =
            grid.iter().map(|q| (q.coords().to_vec(), rng.random::<f64>() < 0.8)).collect();
        let before =
            GoodnessField::from_level0(scales.clone(), region.clone(), 0.5, level0.clone(), 2)
                .unwrap();
        let bad = before.bad_vertices(0);
        if bad.is_empty() {
            continue;
        }
        flip_trials += 1;
        let flip = bad[rng.random_range(0..bad.len())].clone();
        let mut improved = level0.clone();
        improved.insert(flip.coords().to_vec(), true);
        let after =
            GoodnessField::from_level0(scales.clone(), region.clone(), 0.5, improved, 2).unwrap();
        for level in 0..=2 {
            let step = scales.big_l(level).unwrap() as usize;
            for x in (0..32).step_by(step) {
                for y in (0..32).step_by(step) {
                    for z in (0..32).step_by(step) {
                        let q = p(&[x as i64, y as i64, z as i64]);
                        if before.is_good(level, &q) == Some(true) {
                            assert_eq!(
                                after.is_good(level, &q),
                                Some(true),
                                "flip degraded level {level} at {q}"
                            );
                        }
                    }
                }
            }
        }
        let frame_before: BTreeSet<Vec<i64>> = build_frame(&before, 1, 1, &p(&[8, 8, 8]))
            .unwrap()
            .into_iter()
            .map(|q| q.coords().to_vec())
            .collect();
        let frame_after: BTreeSet<Vec<i64>> = build_frame(&after, 1, 1, &p(&[8, 8, 8]))
            .unwrap()
            .into_iter()
            .map(|q| q.coords().to_vec())
            .collect();
        assert!(frame_before.is_subset(&frame_after), "flip shrank the frame");
    }
    assert!(flip_trials >= 20, "monotonicity corpus too small: {flip_trials}");

    // Regular balls on a random graph corpus: exact enumeration equals the
    // brute-force minimum, the sweep bound never undercuts it.
    let mut checked = 0;
    for trial in 0..200u64 {
        let n = 4 + (trial as usize % 9);
        let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.random_range(0..i), i)).collect();
        for _ in 0..rng.random_range(0..=n) {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            if a != b {
                edges.push((a.min(b), a.max(b)));
            }
        }
        let g = SiteGraph::from_edges(n, &edges).unwrap();
        let center = rng.random_range(0..n);
        let ecc = g.distances(center).iter().flatten().max().copied().unwrap() as i64;
        let r = (1 + (trial as i64 % 2)).min(ecc);

        let exact = check_regular_ball(&g, 3, center, r, 0.5, 4.0, 2.0, IsoMode::Exact).unwrap();
        let bound = check_regular_ball(&g, 3, center, r, 0.5, 4.0, 2.0, IsoMode::Bound).unwrap();
        let brute = brute_min_expansion(&g, center, r);

        match (exact.min_expansion, brute) {
            (Some(lib), Some(ours)) => {
                assert!(
                    (lib - ours).abs() <= 1e-12,
                    "exact expansion mismatch on trial {trial}: {lib} vs {ours}"
                );
                if let Some(sweep) = bound.min_expansion {
                    assert!(
                        sweep >= ours - 1e-12,
                        "sweep bound below the true minimum on trial {trial}"
                    );
                }
            }
            (None, None) => {}
            (lib, ours) => panic!("admissibility disagreement on trial {trial}: {lib:?} vs {ours:?}"),
        }
        checked += 1;
    }

    verdict(
        10,
        true,
        &format!(
            "open-soup chain holds, {flip_trials} monotonicity trials, {checked} regular-ball \
             graphs; the doubly-exponential probability bound itself is out of desk reach, \
             structure only"
        ),
    );
}
