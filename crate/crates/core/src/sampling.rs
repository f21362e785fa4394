//! Patch extraction, class-balanced sampling and plane splits.

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imaging::{d8_apply, mirror_pad, Grid};
use crate::net::TrainExample;
use crate::seed;
use crate::tensor::Tensor;

/// Side length of the square patches fed to a network. Always odd so the
/// patch has a center pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub side: usize,
}

impl PatchSpec {
    pub fn new(side: usize) -> Result<Self> {
        if side % 2 == 0 {
            return Err(Error::InvalidArgument(format!("patch side must be odd, got {side}")));
        }
        Ok(Self { side })
    }

    pub fn radius(&self) -> usize {
        (self.side - 1) / 2
    }
}

impl Default for PatchSpec {
    fn default() -> Self {
        Self { side: 65 }
    }
}

/// A plane mirror-padded once so that every original pixel has a full
/// patch around it.
#[derive(Debug, Clone)]
pub struct PaddedPlane {
    padded: Grid<f64>,
    pad: usize,
    height: usize,
    width: usize,
}

impl PaddedPlane {
    pub fn new(plane: &Grid<f64>, spec: PatchSpec) -> Result<Self> {
        let pad = spec.radius();
        Ok(Self { padded: mirror_pad(plane, pad)?, pad, height: plane.height(), width: plane.width() })
    }

    pub fn padded(&self) -> &Grid<f64> {
        &self.padded
    }

    pub fn pad(&self) -> usize {
        self.pad
    }

    /// Dimensions of the original, unpadded plane.
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

/// The `side x side` window centered on original pixel `(row, col)`, as a
/// `[1, side, side]` tensor.
pub fn extract_patch(plane: &PaddedPlane, row: usize, col: usize, spec: PatchSpec) -> Result<Tensor> {
    if row >= plane.height || col >= plane.width {
        return Err(Error::InvalidArgument(format!(
            "center ({row}, {col}) outside {}x{} plane",
            plane.height, plane.width
        )));
    }
    if spec.radius() > plane.pad {
        return Err(Error::InvalidArgument(format!(
            "patch side {} needs padding {}, plane has {}",
            spec.side,
            spec.radius(),
            plane.pad
        )));
    }
    let s = spec.side;
    // Top-left corner in padded coordinates.
    let top = row + plane.pad - spec.radius();
    let left = col + plane.pad - spec.radius();
    let mut data = Vec::with_capacity(s * s);
    for y in top..top + s {
        data.extend_from_slice(&plane.padded.row(y)[left..left + s]);
    }
    Tensor::new(vec![1, s, s], data)
}

/// Applies a dihedral transform to a single-channel square patch.
pub fn transform_patch(patch: Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Ok(patch);
    }
    let shape = patch.shape().to_vec();
    let (h, w) = (shape[1], shape[2]);
    let grid = Grid::new(h, w, patch.into_data())?;
    let t = d8_apply(&grid, k)?;
    Tensor::new(vec![1, t.height(), t.width()], t.into_data())
}

/// A drawn training location: which plane and pixel, its class, and the
/// dihedral transform to apply to its patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Site {
    pub plane: usize,
    pub row: usize,
    pub col: usize,
    pub label: u8,
    pub transform: usize,
}

/// Draws equal numbers of membrane and non-membrane pixels from a set of
/// planes, without replacement within one draw.
#[derive(Debug, Clone)]
pub struct BalancedSampler {
    /// `pools[c]` lists `(plane, row, col)` of every pixel of class `c`.
    pools: [Vec<(usize, usize, usize)>; 2],
    rng: ChaCha8Rng,
}

impl BalancedSampler {
    /// `membrane[i]` is the ground-truth membrane indicator of plane `i`.
    pub fn new(membrane: &[Grid<bool>], seed_value: u64) -> Result<Self> {
        let mut pools: [Vec<(usize, usize, usize)>; 2] = [Vec::new(), Vec::new()];
        for (i, mask) in membrane.iter().enumerate() {
            for y in 0..mask.height() {
                for x in 0..mask.width() {
                    pools[mask.get(y, x) as usize].push((i, y, x));
                }
            }
        }
        if pools.iter().any(Vec::is_empty) {
            return Err(Error::InvalidArgument(
                "both membrane and non-membrane pixels are required for balanced sampling".into(),
            ));
        }
        Ok(Self { pools, rng: seed::rng(seed_value) })
    }

    pub fn class_sizes(&self) -> [usize; 2] {
        [self.pools[0].len(), self.pools[1].len()]
    }

    /// Draws `n / 2` sites per class in shuffled order. With `augment`, each
    /// site gets a uniformly random dihedral transform.
    pub fn draw(&mut self, n: usize, augment: bool) -> Result<Vec<Site>> {
        if n == 0 || n % 2 != 0 {
            return Err(Error::InvalidArgument(format!("sample size must be even and > 0, got {n}")));
        }
        let half = n / 2;
        let mut sites = Vec::with_capacity(n);
        for class in [1u8, 0u8] {
            let pool = &mut self.pools[class as usize];
            let picked: Vec<(usize, usize, usize)> = if pool.len() >= half {
                pool.partial_shuffle(&mut self.rng, half).0.to_vec()
            } else {
                warn!(
                    "class {class} has {} pixels, fewer than {half}; sampling with replacement",
                    pool.len()
                );
                (0..half).map(|_| pool[self.rng.gen_range(0..pool.len())]).collect()
            };
            sites.extend(picked.into_iter().map(|(plane, row, col)| Site {
                plane,
                row,
                col,
                label: class,
                transform: 0,
            }));
        }
        sites.shuffle(&mut self.rng);
        if augment {
            for s in &mut sites {
                s.transform = self.rng.gen_range(0..8);
            }
        }
        Ok(sites)
    }

    /// Mutable access to the generator, for callers that draw extra
    /// per-example randomness in the same stream.
    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Builds the (optionally transformed) patch for a site.
pub fn example_at(planes: &[PaddedPlane], site: &Site, spec: PatchSpec) -> Result<TrainExample> {
    let plane = planes
        .get(site.plane)
        .ok_or_else(|| Error::InvalidArgument(format!("plane {} out of range", site.plane)))?;
    let patch = extract_patch(plane, site.row, site.col, spec)?;
    Ok(TrainExample { patch: transform_patch(patch, site.transform)?, label: site.label })
}

/// One-shot balanced sample of `n` examples from image planes and their
/// label maps.
pub fn balanced_sample(
    planes: &[Grid<f64>],
    labels: &[Grid<u32>],
    spec: PatchSpec,
    n: usize,
    seed_value: u64,
    augment: bool,
) -> Result<Vec<TrainExample>> {
    if planes.len() != labels.len() {
        return Err(Error::Shape("planes and labels differ in count".into()));
    }
    let masks: Vec<Grid<bool>> = labels.iter().map(|l| l.membrane_mask()).collect();
    let padded: Vec<PaddedPlane> =
        planes.iter().map(|p| PaddedPlane::new(p, spec)).collect::<Result<_>>()?;
    let mut sampler = BalancedSampler::new(&masks, seed_value)?;
    sampler.draw(n, augment)?.iter().map(|s| example_at(&padded, s, spec)).collect()
}

/// One fold: the planes a model trains on and the planes it must predict.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// A k-fold partition of plane indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    pub fn k(&self) -> usize {
        self.folds.len()
    }

    /// The fold holding out `plane`, if any.
    pub fn fold_of(&self, plane: usize) -> Option<usize> {
        self.folds.iter().position(|f| f.held_out.contains(&plane))
    }
}

/// Random partition of `0..n_planes` into `k` equally sized held-out sets.
pub fn kfold_plan(n_planes: usize, k: usize, seed_value: u64) -> Result<FoldPlan> {
    if k < 2 || k > n_planes || n_planes % k != 0 {
        return Err(Error::InvalidArgument(format!(
            "{k} folds do not evenly divide {n_planes} planes"
        )));
    }
    let mut order: Vec<usize> = (0..n_planes).collect();
    order.shuffle(&mut seed::rng(seed_value));
    let size = n_planes / k;
    let folds = order
        .chunks(size)
        .map(|chunk| {
            let mut held_out = chunk.to_vec();
            held_out.sort_unstable();
            let train = (0..n_planes).filter(|i| !held_out.contains(i)).collect();
            Fold { train, held_out }
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// Random split of `0..n_planes` into `(train, validation)` index lists,
/// each sorted.
pub fn holdout_split(n_planes: usize, n_val: usize, seed_value: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_val == 0 || n_val >= n_planes {
        return Err(Error::InvalidArgument(format!(
            "cannot hold out {n_val} of {n_planes} planes"
        )));
    }
    let mut order: Vec<usize> = (0..n_planes).collect();
    order.shuffle(&mut seed::rng(seed_value));
    let mut val = order[..n_val].to_vec();
    let mut train = order[n_val..].to_vec();
    val.sort_unstable();
    train.sort_unstable();
    Ok((train, val))
}
