//! The refinement network: a classifier trained on map patches whose center
//! pixel has been masked, applied to its own output round after round.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{mirror_pad, reflect, Grid, LabelMap, ProbMap};
use crate::inference::{calibrate_on_planes, infer_map_dense, ModelTrainConfig, TrainedModel};
use crate::net::{conv_forward, predict, predict_from, LayerSpec, NetworkParams, NetworkSpec, TrainExample};
use crate::sampling::{extract_patch, PaddedPlane, PatchSpec};
use crate::seed;
use crate::tensor::Tensor;
use crate::training::{train_classifier, CalibrationCurve, PlanePatchSource};

/// What replaces the center pixel of a map patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// The center reads 0.
    #[default]
    ConstantZero,
    /// The center reads a fresh `U[0, 1]` draw, so the network learns to
    /// ignore it and whole maps can be refined densely.
    UniformNoise,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::ConstantZero => "constant_zero",
            MaskMode::UniformNoise => "uniform_noise",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant_zero" => Ok(MaskMode::ConstantZero),
            "uniform_noise" => Ok(MaskMode::UniformNoise),
            _ => Err(Error::Config(format!("unknown mask mode `{s}`"))),
        }
    }
}

/// Patch positions that hold a copy of the center pixel `(row, col)`.
///
/// Besides the center itself, mirror padding can reflect the pixel back
/// into its own patch near the plane border; those copies are masked too,
/// so the patch carries no trace of the pixel's value.
pub fn masked_positions(row: usize, col: usize, dims: (usize, usize), ps: PatchSpec) -> Vec<(usize, usize)> {
    let r = ps.radius() as isize;
    let hits = |c: usize, n: usize| -> Vec<usize> {
        (0..ps.side).filter(|&i| reflect(c as isize - r + i as isize, n) == c).collect()
    };
    let rows = hits(row, dims.0);
    let cols = hits(col, dims.1);
    rows.iter().flat_map(|&i| cols.iter().map(move |&j| (i, j))).collect()
}

/// Overwrites every copy of the center pixel in a `[1, side, side]` patch
/// cut around `(row, col)` of a plane with the given dimensions.
pub fn mask_patch<R: Rng + ?Sized>(
    patch: &mut Tensor,
    row: usize,
    col: usize,
    dims: (usize, usize),
    ps: PatchSpec,
    mode: MaskMode,
    rng: &mut R,
) {
    let value = match mode {
        MaskMode::ConstantZero => 0.0,
        MaskMode::UniformNoise => rng.gen::<f64>(),
    };
    fill_positions(patch, &masked_positions(row, col, dims, ps), value);
}

fn fill_positions(patch: &mut Tensor, positions: &[(usize, usize)], value: f64) {
    for &(i, j) in positions {
        patch.set(&[0, i, j], value);
    }
}

/// One training example: the map patch around `(row, col)` with its center
/// masked, labelled with the ground-truth membrane bit there.
pub fn make_icnn_example(
    mdpm: &PaddedPlane,
    membrane: &Grid<bool>,
    row: usize,
    col: usize,
    ps: PatchSpec,
    mode: MaskMode,
    seed_value: u64,
) -> Result<TrainExample> {
    if membrane.dims() != mdpm.dims() {
        return Err(Error::Shape(format!("labels {:?} vs map {:?}", membrane.dims(), mdpm.dims())));
    }
    let mut patch = extract_patch(mdpm, row, col, ps)?;
    mask_patch(&mut patch, row, col, mdpm.dims(), ps, mode, &mut seed::rng(seed_value));
    Ok(TrainExample { patch, label: membrane.get(row, col) as u8 })
}

/// A trained refinement network and how it was trained.
#[derive(Debug, Clone)]
pub struct IcnnTraining {
    pub model: TrainedModel,
    pub mask_mode: MaskMode,
    /// Validation cross-entropy of the kept parameters.
    pub val_loss: f64,
    /// Validation cross-entropy of predicting from the unmasked center
    /// value alone, through a curve fitted on training patches.
    pub center_copy_loss: f64,
}

fn cross_entropy(p: f64, label: u8) -> f64 {
    let q = if label == 1 { p } else { 1.0 - p };
    -q.max(f64::MIN_POSITIVE).ln()
}

fn center(ex: &TrainExample) -> f64 {
    let s = ex.patch.shape()[1];
    ex.patch.at(&[0, s / 2, s / 2])
}

/// Trains the refinement network on map patches of `mdpms[train]`; early
/// stopping and the correction curve use `mdpms[val]`.
pub fn train_icnn(
    mdpms: &[ProbMap],
    labels: &[LabelMap],
    train: &[usize],
    val: &[usize],
    spec: &NetworkSpec,
    cfg: &ModelTrainConfig,
) -> Result<IcnnTraining> {
    if mdpms.len() != labels.len() {
        return Err(Error::Shape("maps and labels differ in count".into()));
    }
    if spec.input_channels != 1 {
        return Err(Error::Spec("refinement networks read a single map channel".into()));
    }
    let ps = PatchSpec::new(spec.input_side)?;
    let mode = cfg.train.mask_mode;
    let pick = |idx: &[usize]| -> (Vec<ProbMap>, Vec<Grid<bool>>) {
        idx.iter().map(|&i| (mdpms[i].clone(), labels[i].membrane_mask())).unzip()
    };
    let (train_maps, train_masks) = pick(train);
    let (val_maps, val_masks) = pick(val);
    let train_seed = seed::derive(cfg.train.seed, "train-sampler");
    let val_seed = seed::derive(cfg.train.seed, "val-sampler");

    let mut source =
        PlanePatchSource::new(&train_maps, &train_masks, ps, train_seed, cfg.train.augment, Some(mode))?;
    let val_examples =
        PlanePatchSource::new(&val_maps, &val_masks, ps, val_seed, false, Some(mode))?.draw(cfg.val_patches)?;
    let outcome = train_classifier(spec, &mut source, &val_examples, &cfg.train)?;

    let raw: Vec<ProbMap> = val_maps
        .iter()
        .map(|m| refine_once(spec, &outcome.params, m, None, mode))
        .collect::<Result<_>>()?;
    let val_labels: Vec<&LabelMap> = val.iter().map(|&i| &labels[i]).collect();
    let curve = calibrate_on_planes(&raw, &val_labels, cfg.calibration_bins)?;

    // The baseline sees the true center value of the same validation sites
    // (masking with a constant consumes no randomness, so the draws agree).
    let fit = PlanePatchSource::new(&train_maps, &train_masks, ps, train_seed, false, None)?.draw(cfg.val_patches)?;
    let centers: Vec<f64> = fit.iter().map(center).collect();
    let truth: Vec<u8> = fit.iter().map(|e| e.label).collect();
    let copy_curve = crate::training::fit_calibration(&centers, &truth, cfg.calibration_bins)?;
    let plain_val = PlanePatchSource::new(&val_maps, &val_masks, ps, val_seed, false, None)?.draw(cfg.val_patches)?;
    let center_copy_loss = plain_val
        .iter()
        .map(|e| cross_entropy(copy_curve.apply(center(e)), e.label))
        .sum::<f64>()
        / plain_val.len() as f64;

    let val_loss = outcome.history.best_val_loss().unwrap_or(f64::NAN);
    Ok(IcnnTraining {
        model: TrainedModel { spec: spec.clone(), params: outcome.params, curve, history: outcome.history },
        mask_mode: mode,
        val_loss,
        center_copy_loss,
    })
}

/// Reference refinement: one masked patch per pixel through the whole
/// network.
pub fn refine_once_patchwise(
    spec: &NetworkSpec,
    params: &NetworkParams,
    mdpm: &ProbMap,
    curve: Option<&CalibrationCurve>,
) -> Result<ProbMap> {
    params.check(spec)?;
    let ps = PatchSpec::new(spec.input_side)?;
    let padded = PaddedPlane::new(mdpm, ps)?;
    let (h, w) = mdpm.dims();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut patch = extract_patch(&padded, y, x, ps)?;
                    fill_positions(&mut patch, &masked_positions(y, x, (h, w), ps), 0.0);
                    predict(spec, params, &patch)
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    finish(Grid::new(h, w, rows.concat())?, curve)
}

fn finish(map: ProbMap, curve: Option<&CalibrationCurve>) -> Result<ProbMap> {
    Ok(match curve {
        Some(c) => map.map(|&p| c.apply(p).clamp(0.0, 1.0)),
        None => map.map(|&p| p.clamp(0.0, 1.0)),
    })
}

/// Masked refinement sharing the first convolution across pixels.
///
/// The first layer is computed once on the padded map. For each pixel only
/// the first-layer outputs whose window covers a masked position are
/// recomputed, in the same accumulation order as a direct convolution, so
/// the result is bit-identical to [`refine_once_patchwise`].
fn refine_masked_shared(
    spec: &NetworkSpec,
    params: &NetworkParams,
    mdpm: &ProbMap,
    curve: Option<&CalibrationCurve>,
) -> Result<ProbMap> {
    let ps = PatchSpec::new(spec.input_side)?;
    let first = params.layers[0].as_ref().expect("conv params");
    let (oc, kh, kw) = (first.weights.shape()[0], first.weights.shape()[2], first.weights.shape()[3]);
    let (h, w) = mdpm.dims();
    let s = ps.side;
    let padded = mirror_pad(mdpm, ps.radius())?;
    let (ph, pw) = padded.dims();
    let input = Tensor::new(vec![1, ph, pw], padded.data().to_vec())?;
    let shared = conv_forward(&input, &first.weights, &first.biases);
    let (dh, dw) = (shared.shape()[1], shared.shape()[2]);
    let (nh, nw) = (s - kh + 1, s - kw + 1);
    let wt = first.weights.data();
    let bias = first.biases.data();
    let d = shared.data();
    let p = padded.data();

    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut out = Vec::with_capacity(w);
            let mut buf = vec![0.0; oc * nh * nw];
            let mut hit = vec![false; s * s];
            for x in 0..w {
                for o in 0..oc {
                    for i in 0..nh {
                        let src = o * dh * dw + (y + i) * dw + x;
                        buf[o * nh * nw + i * nw..o * nh * nw + (i + 1) * nw].copy_from_slice(&d[src..src + nw]);
                    }
                }
                let masked = masked_positions(y, x, (h, w), ps);
                for &(mi, mj) in &masked {
                    hit[mi * s + mj] = true;
                }
                let value = |a: usize, b: usize| if hit[a * s + b] { 0.0 } else { p[(y + a) * pw + x + b] };
                for i in 0..nh {
                    for j in 0..nw {
                        let covers = masked.iter().any(|&(mi, mj)| (i..i + kh).contains(&mi) && (j..j + kw).contains(&mj));
                        if !covers {
                            continue;
                        }
                        for o in 0..oc {
                            let mut acc = bias[o];
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    acc += wt[(o * kh + ky) * kw + kx] * value(i + ky, j + kx);
                                }
                            }
                            buf[o * nh * nw + i * nw + j] = acc;
                        }
                    }
                }
                for &(mi, mj) in &masked {
                    hit[mi * s + mj] = false;
                }
                let t = Tensor::new(vec![oc, nh, nw], buf.clone())?;
                out.push(predict_from(spec, params, 1, t)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    finish(Grid::new(h, w, rows.concat())?, curve)
}

/// One synchronous refinement round: every output pixel is predicted from
/// the input map with its own value masked as in training.
///
/// Under [`MaskMode::ConstantZero`] the output at a pixel never depends on
/// that pixel's input value. Under [`MaskMode::UniformNoise`] the network
/// was trained to ignore the center, so the map is run densely unmasked.
pub fn refine_once(
    spec: &NetworkSpec,
    params: &NetworkParams,
    mdpm: &ProbMap,
    curve: Option<&CalibrationCurve>,
    mode: MaskMode,
) -> Result<ProbMap> {
    params.check(spec)?;
    match mode {
        MaskMode::UniformNoise => {
            let raw = infer_map_dense(spec, params, mdpm, None)?;
            finish(raw, curve)
        }
        MaskMode::ConstantZero => match spec.layers.first() {
            Some(LayerSpec::Conv { .. }) if spec.input_channels == 1 => {
                refine_masked_shared(spec, params, mdpm, curve)
            }
            _ => refine_once_patchwise(spec, params, mdpm, curve),
        },
    }
}

/// Maps of every round; `rounds()[0]` is the input.
#[derive(Debug, Clone, PartialEq)]
pub struct RefineTrace {
    rounds: Vec<ProbMap>,
}

impl RefineTrace {
    pub fn new(rounds: Vec<ProbMap>) -> Result<Self> {
        let first = rounds.first().ok_or_else(|| Error::InvalidArgument("empty trace".into()))?;
        if rounds.iter().any(|r| r.dims() != first.dims()) {
            return Err(Error::Shape("trace rounds differ in size".into()));
        }
        Ok(Self { rounds })
    }

    pub fn rounds(&self) -> &[ProbMap] {
        &self.rounds
    }

    pub fn last(&self) -> &ProbMap {
        self.rounds.last().expect("non-empty trace")
    }

    /// Number of refinement rounds, not counting the input.
    pub fn len(&self) -> usize {
        self.rounds.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Applies further rounds to the last map.
    pub fn extend(
        &mut self,
        spec: &NetworkSpec,
        params: &NetworkParams,
        rounds: usize,
        curve: Option<&CalibrationCurve>,
        mode: MaskMode,
    ) -> Result<()> {
        for _ in 0..rounds {
            let next = refine_once(spec, params, self.last(), curve, mode)?;
            self.rounds.push(next);
        }
        Ok(())
    }
}

pub fn refine_rounds(
    spec: &NetworkSpec,
    params: &NetworkParams,
    mdpm: &ProbMap,
    rounds: usize,
    curve: Option<&CalibrationCurve>,
    mode: MaskMode,
) -> Result<RefineTrace> {
    if rounds == 0 {
        return Err(Error::InvalidArgument("at least one round is required".into()));
    }
    let mut trace = RefineTrace::new(vec![mdpm.clone()])?;
    trace.extend(spec, params, rounds, curve, mode)?;
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::init_params;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_spec() -> NetworkSpec {
        NetworkSpec::from_text("input_side=9\nlayers=conv3x3:4,relu,pool2x2/2,conv3x3:4,relu,fc:6,relu,softmax\n")
            .unwrap()
    }

    fn random_map(h: usize, w: usize, seed_value: u64) -> ProbMap {
        let mut rng = seed::rng(seed_value);
        Grid::from_fn(h, w, |_, _| rng.gen::<f64>())
    }

    #[test]
    fn constant_map_example() {
        let map = Grid::filled(20, 20, 0.8);
        let ps = PatchSpec::new(9).unwrap();
        let padded = PaddedPlane::new(&map, ps).unwrap();
        let gt = Grid::filled(20, 20, true);
        let ex = make_icnn_example(&padded, &gt, 10, 10, ps, MaskMode::ConstantZero, 1).unwrap();
        for (i, v) in ex.patch.data().iter().enumerate() {
            assert_eq!(*v, if i == 40 { 0.0 } else { 0.8 });
        }
        assert_eq!(ex.label, 1);
        assert!(make_icnn_example(&padded, &gt, 20, 0, ps, MaskMode::ConstantZero, 1).is_err());
    }

    #[test]
    fn noise_mask_is_reproducible() {
        let map = Grid::filled(20, 20, 0.8);
        let ps = PatchSpec::new(9).unwrap();
        let padded = PaddedPlane::new(&map, ps).unwrap();
        let gt = Grid::filled(20, 20, false);
        let a = make_icnn_example(&padded, &gt, 5, 6, ps, MaskMode::UniformNoise, 9).unwrap();
        let b = make_icnn_example(&padded, &gt, 5, 6, ps, MaskMode::UniformNoise, 9).unwrap();
        let c = a.patch.at(&[0, 4, 4]);
        assert_eq!(c, b.patch.at(&[0, 4, 4]));
        assert!((0.0..=1.0).contains(&c));
    }

    #[test]
    fn labels_match_ground_truth() {
        let mut rng = seed::rng(3);
        let gt = Grid::from_fn(16, 16, |_, _| rng.gen::<bool>());
        let map = random_map(16, 16, 4);
        let ps = PatchSpec::new(5).unwrap();
        let padded = PaddedPlane::new(&map, ps).unwrap();
        for k in 0..1000u64 {
            let (y, x) = (rng.gen_range(0..16), rng.gen_range(0..16));
            let ex = make_icnn_example(&padded, &gt, y, x, ps, MaskMode::ConstantZero, k).unwrap();
            assert_eq!(ex.label, gt.get(y, x) as u8);
        }
    }

    #[test]
    fn border_copies_are_masked() {
        let ps = PatchSpec::new(9).unwrap();
        let pos = masked_positions(1, 10, (20, 20), ps);
        assert_eq!(pos, vec![(2, 4), (4, 4)]);
        assert_eq!(masked_positions(10, 10, (20, 20), ps), vec![(4, 4)]);
    }

    #[test]
    fn shared_path_matches_reference_bitwise() {
        let spec = small_spec();
        let params = init_params(&spec, 5).unwrap();
        let map = random_map(14, 11, 6);
        let fast = refine_once(&spec, &params, &map, None, MaskMode::ConstantZero).unwrap();
        let slow = refine_once_patchwise(&spec, &params, &map, None).unwrap();
        assert_eq!(fast, slow);
    }

    #[test]
    fn refinement_is_pure_and_keeps_dims() {
        let spec = small_spec();
        let params = init_params(&spec, 7).unwrap();
        let map = random_map(12, 17, 8);
        let a = refine_once(&spec, &params, &map, None, MaskMode::ConstantZero).unwrap();
        let b = refine_once(&spec, &params, &map, None, MaskMode::ConstantZero).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), map.dims());
    }

    #[test]
    fn trace_lengths_and_first_round() {
        let spec = small_spec();
        let params = init_params(&spec, 7).unwrap();
        let map = random_map(10, 10, 8);
        let one = refine_rounds(&spec, &params, &map, 1, None, MaskMode::ConstantZero).unwrap();
        assert_eq!(one.rounds()[1], refine_once(&spec, &params, &map, None, MaskMode::ConstantZero).unwrap());
        let three = refine_rounds(&spec, &params, &map, 3, None, MaskMode::ConstantZero).unwrap();
        assert_eq!(three.rounds().len(), 4);
        assert_eq!(three.rounds()[0], map);
        assert!(refine_rounds(&spec, &params, &map, 0, None, MaskMode::ConstantZero).is_err());
    }

    #[test]
    fn mask_mode_text() {
        for m in [MaskMode::ConstantZero, MaskMode::UniformNoise] {
            assert_eq!(m.to_string().parse::<MaskMode>().unwrap(), m);
        }
        assert!("zero".parse::<MaskMode>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn output_ignores_own_input(seed_value in 0u64..1000, y in 0usize..10, x in 0usize..10, v in 0.0f64..=1.0) {
            let spec = small_spec();
            let params = init_params(&spec, seed_value).unwrap();
            let map = random_map(10, 10, seed_value + 1);
            let mut bumped = map.clone();
            bumped.set(y, x, v);
            let a = refine_once(&spec, &params, &map, None, MaskMode::ConstantZero).unwrap();
            let b = refine_once(&spec, &params, &bumped, None, MaskMode::ConstantZero).unwrap();
            prop_assert_eq!(a.get(y, x).to_bits(), b.get(y, x).to_bits());
        }

        #[test]
        fn trace_values_stay_in_unit_interval(seed_value in 0u64..1000) {
            let spec = small_spec();
            let params = init_params(&spec, seed_value).unwrap();
            let trace = refine_rounds(&spec, &params, &random_map(10, 10, seed_value), 3, None, MaskMode::ConstantZero).unwrap();
            for r in trace.rounds() {
                prop_assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }
}
