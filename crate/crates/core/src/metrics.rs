//! Segmentation of probability maps and the scores used to compare them.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::icnn::RefineTrace;
use crate::imaging::{Grid, LabelMap, ProbMap};

/// Thresholds `0.10, 0.15, ..., 0.90`.
pub fn default_grid() -> Vec<f64> {
    (0..=16).map(|k| (10 + 5 * k) as f64 / 100.0).collect()
}

/// Pixels with `p >= t` become membrane (label 0); the rest are labelled by
/// 4-connected component, numbered from 1 in row-major first-encounter order.
pub fn threshold_segment(map: &ProbMap, t: f64) -> LabelMap {
    let (h, w) = map.dims();
    let mut labels = Grid::filled(h, w, 0u32);
    let mut seen = Grid::filled(h, w, false);
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if seen.get(y, x) || map.get(y, x) >= t {
                continue;
            }
            next += 1;
            seen.set(y, x, true);
            queue.push_back((y, x));
            while let Some((cy, cx)) = queue.pop_front() {
                labels.set(cy, cx, next);
                let neighbors = [
                    (cy.wrapping_sub(1), cx),
                    (cy + 1, cx),
                    (cy, cx.wrapping_sub(1)),
                    (cy, cx + 1),
                ];
                for (ny, nx) in neighbors {
                    if ny < h && nx < w && !seen.get(ny, nx) && map.get(ny, nx) < t {
                        seen.set(ny, nx, true);
                        queue.push_back((ny, nx));
                    }
                }
            }
        }
    }
    labels
}

/// Joint label counts over the ground-truth foreground (`gt != 0`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ContingencyTable {
    counts: HashMap<(u32, u32), u64>,
    proposal: HashMap<u32, u64>,
    truth: HashMap<u32, u64>,
    total: u64,
}

impl ContingencyTable {
    pub fn new(proposal: &LabelMap, gt: &LabelMap) -> Result<Self> {
        if proposal.dims() != gt.dims() {
            return Err(Error::Shape(format!("proposal {:?} vs truth {:?}", proposal.dims(), gt.dims())));
        }
        let mut t = Self::default();
        for (&k, &l) in proposal.data().iter().zip(gt.data()) {
            if l == 0 {
                continue;
            }
            *t.counts.entry((k, l)).or_default() += 1;
            *t.proposal.entry(k).or_default() += 1;
            *t.truth.entry(l).or_default() += 1;
            t.total += 1;
        }
        Ok(t)
    }

    pub fn count(&self, proposal: u32, truth: u32) -> u64 {
        self.counts.get(&(proposal, truth)).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn proposal_marginals(&self) -> &HashMap<u32, u64> {
        &self.proposal
    }

    pub fn truth_marginals(&self) -> &HashMap<u32, u64> {
        &self.truth
    }
}

fn pairs(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Foreground-restricted Rand error: the fraction of unordered pairs of
/// ground-truth foreground pixels on which proposal and truth disagree about
/// being in the same segment. Proposal label 0 is an ordinary segment.
pub fn rand_error_fg(proposal: &LabelMap, gt: &LabelMap) -> Result<f64> {
    let t = ContingencyTable::new(proposal, gt)?;
    if t.total < 2 {
        return Err(Error::InvalidArgument(format!(
            "Rand error needs two foreground pixels, found {}",
            t.total
        )));
    }
    let both: u128 = t.counts.values().map(|&c| pairs(c)).sum();
    let same_p: u128 = t.proposal.values().map(|&c| pairs(c)).sum();
    let same_t: u128 = t.truth.values().map(|&c| pairs(c)).sum();
    let disagree = same_p + same_t - 2 * both;
    Ok(disagree as f64 / pairs(t.total) as f64)
}

fn pixel_error_at(map: &ProbMap, membrane: &[bool], t: f64) -> f64 {
    let wrong = map.data().iter().zip(membrane).filter(|(&p, &m)| (p >= t) != m).count();
    wrong as f64 / membrane.len() as f64
}

fn argmin(values: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    // Strict comparison keeps the first, i.e. smallest, threshold on ties.
    values.fold((f64::NAN, f64::INFINITY), |best, (t, e)| if e < best.1 { (t, e) } else { best })
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("threshold grid is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument("threshold grid must be increasing".into()));
    }
    Ok(())
}

/// Smallest fraction of misclassified pixels over the grid, with the
/// threshold achieving it. Returns `(error, threshold)`.
pub fn pixel_error(map: &ProbMap, gt: &LabelMap, grid: &[f64]) -> Result<(f64, f64)> {
    check_grid(grid)?;
    if map.dims() != gt.dims() {
        return Err(Error::Shape(format!("map {:?} vs truth {:?}", map.dims(), gt.dims())));
    }
    let membrane: Vec<bool> = gt.data().iter().map(|&l| l == 0).collect();
    let (t, e) = argmin(grid.iter().map(|&t| (t, pixel_error_at(map, &membrane, t))));
    Ok((e, t))
}

/// Threshold minimizing the Rand error of the segmented map. Returns
/// `(threshold, error)`.
pub fn best_threshold_sweep(map: &ProbMap, gt: &LabelMap, grid: &[f64]) -> Result<(f64, f64)> {
    check_grid(grid)?;
    let errors = grid
        .iter()
        .map(|&t| rand_error_fg(&threshold_segment(map, t), gt).map(|e| (t, e)))
        .collect::<Result<Vec<_>>>()?;
    Ok(argmin(errors.into_iter()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundRow {
    pub round: usize,
    pub rand_error: f64,
    pub pixel_error: f64,
    pub best_threshold: f64,
}

/// Per-round scores averaged over planes.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub rows: Vec<RoundRow>,
}

impl RoundReport {
    pub const CSV_HEADER: &'static str = "round,rand_error,pixel_error,best_threshold";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.rows {
            writeln!(out, "{},{:.6},{:.6},{:.6}", r.round, r.rand_error, r.pixel_error, r.best_threshold).unwrap();
        }
        out
    }

    /// The row with the lowest Rand error; earliest round on ties.
    pub fn best(&self) -> &RoundRow {
        self.rows
            .iter()
            .fold(&self.rows[0], |b, r| if r.rand_error < b.rand_error { r } else { b })
    }

    pub fn summary(&self) -> String {
        let best = self.best();
        format!(
            "best round {}, rand_error {:.6}, vs round 0 {:.6}",
            best.round, best.rand_error, self.rows[0].rand_error
        )
    }
}

/// Scores every round of every trace.
///
/// Each round uses one threshold for all planes: the grid value minimizing
/// the plane-averaged Rand error. The pixel error column is the minimum over
/// the grid of the plane-averaged pixel error.
pub fn round_report(traces: &[RefineTrace], gts: &[LabelMap], grid: &[f64]) -> Result<RoundReport> {
    check_grid(grid)?;
    if traces.is_empty() || traces.len() != gts.len() {
        return Err(Error::Shape(format!("{} traces for {} label planes", traces.len(), gts.len())));
    }
    let n_rounds = traces[0].rounds().len();
    if traces.iter().any(|t| t.rounds().len() != n_rounds) {
        return Err(Error::Shape("traces differ in round count".into()));
    }
    for (t, g) in traces.iter().zip(gts) {
        if t.last().dims() != g.dims() {
            return Err(Error::Shape(format!("trace {:?} vs labels {:?}", t.last().dims(), g.dims())));
        }
    }
    // scores[plane][round] = (rand per threshold, pixel per threshold)
    let scores: Vec<Vec<(Vec<f64>, Vec<f64>)>> = traces
        .par_iter()
        .zip(gts.par_iter())
        .map(|(trace, gt)| {
            let membrane: Vec<bool> = gt.data().iter().map(|&l| l == 0).collect();
            trace
                .rounds()
                .iter()
                .map(|map| {
                    let rand = grid
                        .iter()
                        .map(|&t| rand_error_fg(&threshold_segment(map, t), gt))
                        .collect::<Result<Vec<_>>>()?;
                    let pix = grid.iter().map(|&t| pixel_error_at(map, &membrane, t)).collect();
                    Ok((rand, pix))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let n = traces.len() as f64;
    let rows = (0..n_rounds)
        .map(|r| {
            let mean = |pick: &dyn Fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>, i: usize| {
                scores.iter().map(|p| pick(&p[r])[i]).sum::<f64>() / n
            };
            let (t, rand_error) = argmin(grid.iter().enumerate().map(|(i, &t)| (t, mean(&|s| &s.0, i))));
            let (_, pixel_error) = argmin(grid.iter().enumerate().map(|(i, &t)| (t, mean(&|s| &s.1, i))));
            RoundRow { round: r, rand_error, pixel_error, best_threshold: t }
        })
        .collect();
    Ok(RoundReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use proptest::prelude::*;
    use rand::Rng;

    /// Recursive-free flood fill with an explicit stack, labelling in the
    /// same scan order.
    fn flood_oracle(map: &ProbMap, t: f64) -> LabelMap {
        let (h, w) = map.dims();
        let mut out = Grid::filled(h, w, 0u32);
        let mut next = 0;
        for y in 0..h {
            for x in 0..w {
                if map.get(y, x) >= t || out.get(y, x) != 0 {
                    continue;
                }
                next += 1;
                let mut stack = vec![(y as isize, x as isize)];
                while let Some((cy, cx)) = stack.pop() {
                    if cy < 0 || cx < 0 || cy >= h as isize || cx >= w as isize {
                        continue;
                    }
                    let (uy, ux) = (cy as usize, cx as usize);
                    if map.get(uy, ux) >= t || out.get(uy, ux) != 0 {
                        continue;
                    }
                    out.set(uy, ux, next);
                    stack.extend([(cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)]);
                }
            }
        }
        out
    }

    /// Direct enumeration of all foreground pixel pairs.
    pub(crate) fn pair_oracle(p: &LabelMap, g: &LabelMap) -> f64 {
        let fg: Vec<(u32, u32)> = p.data().iter().zip(g.data()).filter(|(_, &l)| l != 0).map(|(&a, &b)| (a, b)).collect();
        let (mut agree, mut total) = (0u64, 0u64);
        for i in 0..fg.len() {
            for j in i + 1..fg.len() {
                total += 1;
                if (fg[i].0 == fg[j].0) == (fg[i].1 == fg[j].1) {
                    agree += 1;
                }
            }
        }
        1.0 - agree as f64 / total as f64
    }

    fn random_labels(h: usize, w: usize, k: u32, rng: &mut impl Rng) -> LabelMap {
        Grid::from_fn(h, w, |_, _| rng.gen_range(0..k))
    }

    #[test]
    fn default_grid_values() {
        let g = default_grid();
        assert_eq!(g.len(), 17);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[16], 0.9);
        assert_eq!(g[8], 0.5);
    }

    #[test]
    fn all_zero_map_is_one_segment() {
        let seg = threshold_segment(&Grid::filled(5, 7, 0.0), 0.5);
        assert!(seg.data().iter().all(|&l| l == 1));
    }

    #[test]
    fn vertical_line_splits_in_two() {
        let map = Grid::from_fn(6, 9, |_, x| if x == 4 { 1.0 } else { 0.0 });
        let seg = threshold_segment(&map, 0.5);
        assert_eq!(seg.get(0, 0), 1);
        assert_eq!(seg.get(0, 8), 2);
        assert_eq!(seg.get(3, 4), 0);
        assert_eq!(*seg.data().iter().max().unwrap(), 2);
    }

    #[test]
    fn diagonal_neighbors_do_not_connect() {
        let map = Grid::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(threshold_segment(&map, 0.5).data(), &[1, 0, 0, 2]);
    }

    #[test]
    fn segmentation_matches_flood_fill() {
        let mut rng = seed::rng(21);
        for _ in 0..200 {
            let map = Grid::from_fn(12, 12, |_, _| rng.gen::<f64>());
            let t = rng.gen_range(0.2..0.8);
            assert_eq!(threshold_segment(&map, t), flood_oracle(&map, t));
        }
    }

    #[test]
    fn hand_case_two_segments_merged() {
        let gt = Grid::new(1, 4, vec![1, 1, 2, 2]).unwrap();
        let prop = Grid::new(1, 4, vec![5, 5, 5, 5]).unwrap();
        let e = rand_error_fg(&prop, &gt).unwrap();
        assert!((e - 4.0 / 6.0).abs() < 1e-15);
        assert!((e - 0.6667).abs() < 1e-4);
    }

    #[test]
    fn identity_has_zero_error() {
        let gt = Grid::new(2, 3, vec![1, 1, 0, 2, 2, 3]).unwrap();
        assert_eq!(rand_error_fg(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn too_little_foreground_is_an_error() {
        let gt = Grid::new(1, 3, vec![0, 0, 1]).unwrap();
        assert!(rand_error_fg(&gt, &gt).is_err());
    }

    #[test]
    fn table_counts() {
        let gt = Grid::new(1, 5, vec![1, 1, 2, 0, 2]).unwrap();
        let prop = Grid::new(1, 5, vec![3, 0, 0, 7, 0]).unwrap();
        let t = ContingencyTable::new(&prop, &gt).unwrap();
        assert_eq!(t.total(), 4);
        assert_eq!(t.count(0, 2), 2);
        assert_eq!(t.count(7, 0), 0);
        assert_eq!(t.proposal_marginals()[&0], 3);
        assert_eq!(t.truth_marginals()[&1], 2);
    }

    #[test]
    fn contingency_matches_pair_enumeration() {
        let mut rng = seed::rng(22);
        for _ in 0..500 {
            let gt = random_labels(8, 8, 4, &mut rng);
            let prop = random_labels(8, 8, 5, &mut rng);
            let fast = rand_error_fg(&prop, &gt).unwrap();
            assert!((fast - pair_oracle(&prop, &gt)).abs() < 1e-12);
        }
    }

    #[test]
    fn pixel_error_cases() {
        let gt = Grid::new(2, 2, vec![0, 1, 1, 1]).unwrap();
        let perfect = gt.map(|&l| if l == 0 { 1.0 } else { 0.0 });
        assert_eq!(pixel_error(&perfect, &gt, &[0.5]).unwrap(), (0.0, 0.5));
        let flat = Grid::filled(2, 2, 0.5);
        assert_eq!(pixel_error(&flat, &gt, &[0.25]).unwrap(), (0.75, 0.25));
        assert_eq!(pixel_error(&flat, &gt, &[0.75]).unwrap(), (0.25, 0.75));
        assert_eq!(pixel_error(&flat, &gt, &[0.25, 0.75]).unwrap(), (0.25, 0.75));
        assert!(pixel_error(&flat, &gt, &[]).is_err());
    }

    #[test]
    fn pixel_error_hand_count() {
        let gt = Grid::new(2, 3, vec![0, 0, 1, 1, 1, 0]).unwrap();
        let map = Grid::new(2, 3, vec![0.9, 0.3, 0.6, 0.1, 0.2, 0.7]).unwrap();
        // At 0.5: pixel 1 missed, pixel 2 false alarm.
        assert_eq!(pixel_error(&map, &gt, &[0.5]).unwrap(), (2.0 / 6.0, 0.5));
        // At 0.25: pixel 2 false alarm only.
        assert_eq!(pixel_error(&map, &gt, &[0.25, 0.5]).unwrap(), (1.0 / 6.0, 0.25));
    }

    #[test]
    fn sweep_on_perfect_map() {
        let gt = Grid::from_fn(6, 6, |_, x| if x == 3 { 0 } else if x < 3 { 1 } else { 2 });
        let map = gt.map(|&l| if l == 0 { 1.0 } else { 0.0 });
        assert_eq!(best_threshold_sweep(&map, &gt, &default_grid()).unwrap(), (0.1, 0.0));
        let single = best_threshold_sweep(&map, &gt, &[0.4]).unwrap();
        assert_eq!(single, (0.4, rand_error_fg(&threshold_segment(&map, 0.4), &gt).unwrap()));
    }

    #[test]
    fn sweep_matches_exhaustive_evaluation() {
        let mut rng = seed::rng(23);
        let gt = Grid::from_fn(10, 10, |y, x| if y == 5 || x == 5 { 0 } else { 1 + (y > 5) as u32 * 2 + (x > 5) as u32 });
        let map = gt.map(|&l| if l == 0 { 0.7 } else { 0.2 } + rng.gen_range(-0.15..0.15));
        let grid = default_grid();
        let (t, e) = best_threshold_sweep(&map, &gt, &grid).unwrap();
        let all: Vec<f64> = grid.iter().map(|&t| rand_error_fg(&threshold_segment(&map, t), &gt).unwrap()).collect();
        let min = all.iter().copied().fold(f64::INFINITY, f64::min);
        assert_eq!(e, min);
        assert_eq!(t, grid[all.iter().position(|&v| v == min).unwrap()]);
    }

    #[test]
    fn report_shapes_and_csv() {
        let gt = Grid::from_fn(8, 8, |_, x| if x == 4 { 0 } else { 1 + (x > 4) as u32 });
        let map = gt.map(|&l| if l == 0 { 0.8 } else { 0.3 });
        let one = RefineTrace::new(vec![map.clone()]).unwrap();
        let report = round_report(&[one], std::slice::from_ref(&gt), &default_grid()).unwrap();
        assert_eq!(report.rows.len(), 1);
        let same = RefineTrace::new(vec![map.clone(), map.clone(), map]).unwrap();
        let report = round_report(&[same.clone(), same], &[gt.clone(), gt], &default_grid()).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows.windows(2).all(|w| w[0].rand_error == w[1].rand_error
            && w[0].pixel_error == w[1].pixel_error
            && w[0].best_threshold == w[1].best_threshold));
        let csv = report.to_csv();
        assert_eq!(csv.lines().next().unwrap(), RoundReport::CSV_HEADER);
        assert_eq!(csv.lines().nth(1).unwrap(), "0,0.000000,0.000000,0.350000");
        assert_eq!(report.summary(), "best round 0, rand_error 0.000000, vs round 0 0.000000");
    }

    proptest! {
        #[test]
        fn relabeling_proposal_changes_nothing(
            gt in prop::collection::vec(0u32..4, 36),
            prop_labels in prop::collection::vec(0u32..6, 36),
            offset in 1u32..100,
        ) {
            let gt = Grid::new(6, 6, gt).unwrap();
            prop_assume!(gt.data().iter().filter(|&&l| l != 0).count() >= 2);
            let p = Grid::new(6, 6, prop_labels).unwrap();
            let renamed = p.map(|&l| if l == 0 { 0 } else { l * 7 + offset });
            prop_assert_eq!(rand_error_fg(&p, &gt).unwrap(), rand_error_fg(&renamed, &gt).unwrap());
        }

        #[test]
        fn self_error_is_zero(labels in prop::collection::vec(0u32..5, 2..100)) {
            let n = labels.len();
            let g = Grid::new(1, n, labels).unwrap();
            prop_assume!(g.data().iter().filter(|&&l| l != 0).count() >= 2);
            prop_assert_eq!(rand_error_fg(&g, &g).unwrap(), 0.0);
        }

        #[test]
        fn table_equals_pair_loop(
            gt in prop::collection::vec(0u32..4, 100),
            p in prop::collection::vec(0u32..4, 100),
        ) {
            let gt = Grid::new(10, 10, gt).unwrap();
            prop_assume!(gt.data().iter().filter(|&&l| l != 0).count() >= 2);
            let p = Grid::new(10, 10, p).unwrap();
            prop_assert!((rand_error_fg(&p, &gt).unwrap() - pair_oracle(&p, &gt)).abs() < 1e-12);
        }

        #[test]
        fn segments_partition_and_respect_membrane(values in prop::collection::vec(0.0f64..1.0, 64), t in 0.05f64..0.95) {
            let map = Grid::new(8, 8, values).unwrap();
            let seg = threshold_segment(&map, t);
            for y in 0..8 {
                for x in 0..8 {
                    prop_assert_eq!(seg.get(y, x) == 0, map.get(y, x) >= t);
                    if x + 1 < 8 && seg.get(y, x) != 0 && seg.get(y, x + 1) != 0 {
                        prop_assert_eq!(seg.get(y, x), seg.get(y, x + 1));
                    }
                    if y + 1 < 8 && seg.get(y, x) != 0 && seg.get(y + 1, x) != 0 {
                        prop_assert_eq!(seg.get(y, x), seg.get(y + 1, x));
                    }
                }
            }
        }

        #[test]
        fn one_flip_costs_one_pixel(values in prop::collection::vec(0.0f64..1.0, 30), idx in 0usize..30) {
            let gt = Grid::new(5, 6, (0..30).map(|i| (i % 3) as u32).collect()).unwrap();
            let map = Grid::new(5, 6, values).unwrap();
            let t = 0.5;
            let membrane = gt.data()[idx] == 0;
            prop_assume!((map.data()[idx] >= t) == membrane);
            let mut flipped = map.clone();
            flipped.data_mut()[idx] = if membrane { 0.0 } else { 1.0 };
            let (a, _) = pixel_error(&map, &gt, &[t]).unwrap();
            let (b, _) = pixel_error(&flipped, &gt, &[t]).unwrap();
            prop_assert!((b - a - 1.0 / 30.0).abs() < 1e-12);
        }
    }
}
