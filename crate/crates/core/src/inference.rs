//! Whole-plane probability maps from a patch classifier.
//!
//! [`infer_map_patchwise`] runs the network once per pixel on its
//! mirror-padded patch. [`infer_map_dense`] produces the same map while
//! computing every convolution once per plane: each pooling layer of stride
//! `s` splits the feature maps into `s * s` phase fragments, and the final
//! per-pixel outputs are stitched back from the fragment matching the
//! pixel's phase sequence. Both paths accumulate in the same order, so they
//! agree to rounding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::imaging::{d8_apply, d8_inverse, mirror_pad, GrayImage, Grid, LabelMap, ProbMap};
use crate::net::{conv_forward, predict, LayerSpec, NetworkParams, NetworkSpec};
use crate::sampling::{extract_patch, holdout_split, FoldPlan, PaddedPlane, PatchSpec};
use crate::seed;
use crate::tensor::Tensor;
use crate::training::{
    fit_calibration, train_classifier, CalibrationCurve, PlanePatchSource, TrainConfig, TrainHistory,
};

/// How per-pixel outputs are computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InferenceMode {
    Patchwise,
    #[default]
    Dense,
}

fn calibrate(map: ProbMap, curve: Option<&CalibrationCurve>) -> ProbMap {
    match curve {
        Some(c) => map.map(|&p| c.apply(p)),
        None => map,
    }
}

fn patch_spec(spec: &NetworkSpec) -> Result<PatchSpec> {
    if spec.input_channels != 1 {
        return Err(Error::Spec("plane inference needs a single-channel network".into()));
    }
    PatchSpec::new(spec.input_side)
}

/// Runs the network on the patch around every pixel.
pub fn infer_map_patchwise(
    spec: &NetworkSpec,
    params: &NetworkParams,
    plane: &Grid<f64>,
    curve: Option<&CalibrationCurve>,
) -> Result<ProbMap> {
    params.check(spec)?;
    let ps = patch_spec(spec)?;
    let padded = PaddedPlane::new(plane, ps)?;
    let (h, w) = plane.dims();
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| predict(spec, params, &extract_patch(&padded, y, x, ps)?))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let map = Grid::new(h, w, rows.concat())?;
    Ok(calibrate(map, curve))
}

fn relu_in_place(t: &mut Tensor) {
    for v in t.data_mut() {
        if !(*v > 0.0) {
            *v = 0.0;
        }
    }
}

/// Max pooling restricted to windows starting at `(py + s*i, px + s*j)`.
/// Returns `None` when the phase leaves no complete window.
fn pool_phase(t: &Tensor, kh: usize, kw: usize, s: usize, py: usize, px: usize) -> Option<Tensor> {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    if py + kh > h || px + kw > w {
        return None;
    }
    let oh = (h - py - kh) / s + 1;
    let ow = (w - px - kw) / s + 1;
    let x = t.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let (y0, x0) = (py + oy * s, px + ox * s);
                let mut best = x[base + y0 * w + x0];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let v = x[base + (y0 + ky) * w + x0 + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Some(Tensor::new(vec![c, oh, ow], out).expect("pool phase shape"))
}

/// `W x + b` at every spatial position, as a 1x1 convolution.
fn pointwise_linear(t: &Tensor, weights: &Tensor, biases: &Tensor) -> Result<Tensor> {
    let ws = weights.shape();
    let w4 = weights.clone().reshape(vec![ws[0], ws[1], 1, 1])?;
    Ok(conv_forward(t, &w4, biases))
}

/// Per-position softmax over channels; returns the class-1 probability map.
fn pointwise_softmax(logits: &Tensor) -> Vec<f64> {
    let (c, h, w) = (logits.shape()[0], logits.shape()[1], logits.shape()[2]);
    let n = h * w;
    let x = logits.data();
    (0..n)
        .map(|i| {
            let l: Vec<f64> = (0..c).map(|k| x[k * n + i]).collect();
            let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
            e[1] / e.iter().sum::<f64>()
        })
        .collect()
}

/// Shift-and-stitch dense inference, equal to [`infer_map_patchwise`] up
/// to rounding.
pub fn infer_map_dense(
    spec: &NetworkSpec,
    params: &NetworkParams,
    plane: &Grid<f64>,
    curve: Option<&CalibrationCurve>,
) -> Result<ProbMap> {
    params.check(spec)?;
    let ps = patch_spec(spec)?;
    let padded = mirror_pad(plane, ps.radius())?;
    let (ph, pw) = padded.dims();
    let mut fragments: Vec<Option<Tensor>> =
        vec![Some(Tensor::new(vec![1, ph, pw], padded.into_data())?)];
    let mut strides = Vec::new();
    let mut probs: Option<Vec<Vec<f64>>> = None;

    for (i, layer) in spec.layers.iter().enumerate() {
        let lp = params.layers[i].as_ref();
        fragments = match *layer {
            LayerSpec::Conv { .. } => {
                let p = lp.expect("conv params");
                fragments
                    .into_par_iter()
                    .map(|f| f.map(|t| conv_forward(&t, &p.weights, &p.biases)))
                    .collect()
            }
            LayerSpec::Relu => fragments
                .into_iter()
                .map(|f| {
                    f.map(|mut t| {
                        relu_in_place(&mut t);
                        t
                    })
                })
                .collect(),
            LayerSpec::MaxPool { kernel_h, kernel_w, stride } => {
                strides.push(stride);
                fragments
                    .par_iter()
                    .flat_map_iter(|f| {
                        (0..stride * stride).map(move |phase| {
                            f.as_ref().and_then(|t| {
                                pool_phase(t, kernel_h, kernel_w, stride, phase / stride, phase % stride)
                            })
                        })
                    })
                    .collect()
            }
            LayerSpec::FullyConnected { .. } => {
                let p = lp.expect("fc params");
                fragments
                    .into_iter()
                    .map(|f| f.map(|t| pointwise_linear(&t, &p.weights, &p.biases)).transpose())
                    .collect::<Result<_>>()?
            }
            LayerSpec::Softmax => {
                let p = lp.expect("softmax params");
                let out: Vec<Vec<f64>> = fragments
                    .iter()
                    .map(|f| match f {
                        Some(t) => pointwise_linear(t, &p.weights, &p.biases).map(|l| pointwise_softmax(&l)),
                        None => Ok(Vec::new()),
                    })
                    .collect::<Result<_>>()?;
                probs = Some(out);
                Vec::new()
            }
        };
    }

    let probs = probs.ok_or_else(|| Error::Spec("network has no softmax layer".into()))?;
    // Width of each final fragment, needed to index its flat output.
    let final_widths = fragment_widths(spec, ph, pw)?;
    let (h, w) = plane.dims();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (mut oy, mut ox, mut idx) = (y, x, 0);
            for &s in &strides {
                idx = idx * s * s + (oy % s) * s + ox % s;
                oy /= s;
                ox /= s;
            }
            let v = probs[idx]
                .get(oy * final_widths[idx] + ox)
                .copied()
                .ok_or_else(|| Error::Shape(format!("dense output missing pixel ({y}, {x})")))?;
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("dense output at ({y}, {x})")));
            }
            out.push(v);
        }
    }
    Ok(calibrate(Grid::new(h, w, out)?, curve))
}

/// Output width of every final fragment of a dense pass over a
/// `ph x pw` padded plane.
fn fragment_widths(spec: &NetworkSpec, ph: usize, pw: usize) -> Result<Vec<usize>> {
    let mut dims: Vec<Option<(usize, usize)>> = vec![Some((ph, pw))];
    for layer in &spec.layers {
        dims = match *layer {
            LayerSpec::Conv { kernel_h, kernel_w, .. } => dims
                .into_iter()
                .map(|d| d.map(|(h, w)| (h + 1 - kernel_h, w + 1 - kernel_w)))
                .collect(),
            LayerSpec::MaxPool { kernel_h, kernel_w, stride } => dims
                .iter()
                .flat_map(|d| {
                    (0..stride * stride).map(move |phase| {
                        let (py, px) = (phase / stride, phase % stride);
                        d.and_then(|(h, w)| {
                            (py + kernel_h <= h && px + kernel_w <= w)
                                .then(|| ((h - py - kernel_h) / stride + 1, (w - px - kernel_w) / stride + 1))
                        })
                    })
                })
                .collect(),
            _ => dims,
        };
    }
    Ok(dims.into_iter().map(|d| d.map_or(0, |(_, w)| w)).collect())
}

pub fn infer_map(
    spec: &NetworkSpec,
    params: &NetworkParams,
    plane: &Grid<f64>,
    curve: Option<&CalibrationCurve>,
    mode: InferenceMode,
) -> Result<ProbMap> {
    match mode {
        InferenceMode::Patchwise => infer_map_patchwise(spec, params, plane, curve),
        InferenceMode::Dense => infer_map_dense(spec, params, plane, curve),
    }
}

/// Averages the maps of all 8 dihedral transforms of `plane`, each mapped
/// back to the original frame. Per pixel the 8 values are summed in sorted
/// order, which makes the result exactly equivariant under the group.
/// The curve, if any, is applied to the average.
pub fn infer_map_tta_with(
    spec: &NetworkSpec,
    params: &NetworkParams,
    plane: &Grid<f64>,
    curve: Option<&CalibrationCurve>,
    mode: InferenceMode,
) -> Result<ProbMap> {
    let maps: Vec<ProbMap> = (0..8)
        .map(|k| {
            let t = d8_apply(plane, k)?;
            d8_apply(&infer_map(spec, params, &t, None, mode)?, d8_inverse(k))
        })
        .collect::<Result<_>>()?;
    let (h, w) = plane.dims();
    let mut out = Vec::with_capacity(h * w);
    let mut vals = [0.0f64; 8];
    for i in 0..h * w {
        for (v, m) in vals.iter_mut().zip(&maps) {
            *v = m.data()[i];
        }
        vals.sort_by(f64::total_cmp);
        out.push(vals.iter().sum::<f64>() / 8.0);
    }
    Ok(calibrate(Grid::new(h, w, out)?, curve))
}

pub fn infer_map_tta(
    spec: &NetworkSpec,
    params: &NetworkParams,
    plane: &Grid<f64>,
    curve: Option<&CalibrationCurve>,
) -> Result<ProbMap> {
    infer_map_tta_with(spec, params, plane, curve, InferenceMode::Dense)
}

/// Pixelwise arithmetic mean, accumulated in list order.
pub fn average_maps(maps: &[ProbMap]) -> Result<ProbMap> {
    let first = maps.first().ok_or_else(|| Error::InvalidArgument("no maps to average".into()))?;
    if let Some(m) = maps.iter().find(|m| m.dims() != first.dims()) {
        return Err(Error::Shape(format!("map {:?} vs {:?}", m.dims(), first.dims())));
    }
    let mut acc = vec![0.0; first.data().len()];
    for m in maps {
        for (a, v) in acc.iter_mut().zip(m.data()) {
            *a += v;
        }
    }
    let n = maps.len() as f64;
    Grid::new(first.height(), first.width(), acc.into_iter().map(|v| (v / n).clamp(0.0, 1.0)).collect())
}

/// Everything needed to turn training planes into a calibrated model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelTrainConfig {
    pub train: TrainConfig,
    /// Planes held out of a model's own training set for early stopping
    /// and calibration.
    pub val_planes: usize,
    /// Balanced validation patches used for early stopping.
    pub val_patches: usize,
    pub calibration_bins: usize,
    /// Average over the 8 dihedral transforms at inference time.
    pub tta: bool,
    pub mode: InferenceMode,
}

impl Default for ModelTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            val_planes: 3,
            val_patches: 1000,
            calibration_bins: 10,
            tta: true,
            mode: InferenceMode::Dense,
        }
    }
}

/// A trained network with its bias-correction curve.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub spec: NetworkSpec,
    pub params: NetworkParams,
    pub curve: CalibrationCurve,
    pub history: TrainHistory,
}

impl TrainedModel {
    /// Calibrated map of one plane using the configured inference path.
    pub fn infer(&self, plane: &Grid<f64>, tta: bool, mode: InferenceMode) -> Result<ProbMap> {
        raw_map(&self.spec, &self.params, plane, tta, mode).map(|m| calibrate(m, Some(&self.curve)))
    }
}

fn raw_map(
    spec: &NetworkSpec,
    params: &NetworkParams,
    plane: &Grid<f64>,
    tta: bool,
    mode: InferenceMode,
) -> Result<ProbMap> {
    if tta {
        infer_map_tta_with(spec, params, plane, None, mode)
    } else {
        infer_map(spec, params, plane, None, mode)
    }
}

/// Fits a calibration curve on every pixel of the validation planes.
pub fn calibrate_on_planes(
    raw_maps: &[ProbMap],
    labels: &[&LabelMap],
    n_bins: usize,
) -> Result<CalibrationCurve> {
    let mut raw = Vec::new();
    let mut truth = Vec::new();
    for (m, l) in raw_maps.iter().zip(labels) {
        raw.extend_from_slice(m.data());
        truth.extend(l.data().iter().map(|&v| (v == 0) as u8));
    }
    fit_calibration(&raw, &truth, n_bins)
}

/// Trains a base network on `images[train]` with early stopping and
/// calibration on `images[val]`.
pub fn train_base_model(
    images: &[&GrayImage],
    labels: &[&LabelMap],
    train: &[usize],
    val: &[usize],
    spec: &NetworkSpec,
    cfg: &ModelTrainConfig,
) -> Result<TrainedModel> {
    let ps = patch_spec(spec)?;
    let pick = |idx: &[usize]| -> (Vec<GrayImage>, Vec<Grid<bool>>) {
        idx.iter().map(|&i| (images[i].clone(), labels[i].membrane_mask())).unzip()
    };
    let (train_planes, train_masks) = pick(train);
    let (val_planes, val_masks) = pick(val);
    let mut source = PlanePatchSource::new(
        &train_planes,
        &train_masks,
        ps,
        seed::derive(cfg.train.seed, "train-sampler"),
        cfg.train.augment,
        None,
    )?;
    let val_examples =
        PlanePatchSource::new(&val_planes, &val_masks, ps, seed::derive(cfg.train.seed, "val-sampler"), false, None)?
            .draw(cfg.val_patches)?;
    let outcome = train_classifier(spec, &mut source, &val_examples, &cfg.train)?;
    let raw: Vec<ProbMap> = val_planes
        .iter()
        .map(|p| raw_map(spec, &outcome.params, p, cfg.tta, cfg.mode))
        .collect::<Result<_>>()?;
    let val_labels: Vec<&LabelMap> = val.iter().map(|&i| labels[i]).collect();
    let curve = calibrate_on_planes(&raw, &val_labels, cfg.calibration_bins)?;
    Ok(TrainedModel { spec: spec.clone(), params: outcome.params, curve, history: outcome.history })
}

/// Which fold model produced a plane's map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub plane: usize,
    pub fold: usize,
}

#[derive(Debug, Clone)]
pub struct MdpmGeneration {
    /// One calibrated map per input plane, in input order.
    pub maps: Vec<ProbMap>,
    /// One model per fold, kept for ensembling over other stacks.
    pub models: Vec<TrainedModel>,
    pub provenance: Vec<Provenance>,
    pub diverged_folds: Vec<usize>,
}

impl MdpmGeneration {
    /// Checks that every plane's map came from a fold that did not train on
    /// it, and that every plane has exactly one map.
    pub fn verify_no_leakage(&self, plan: &FoldPlan) -> Result<()> {
        let mut seen = vec![0usize; self.maps.len()];
        for p in &self.provenance {
            let fold = plan
                .folds
                .get(p.fold)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown fold {}", p.fold)))?;
            if fold.train.contains(&p.plane) || !fold.held_out.contains(&p.plane) {
                return Err(Error::InvalidArgument(format!(
                    "plane {} was predicted by fold {} which trained on it",
                    p.plane, p.fold
                )));
            }
            seen[p.plane] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::InvalidArgument("every plane needs exactly one map".into()));
        }
        Ok(())
    }
}

/// Content fingerprint used to order planes independently of stack order.
fn plane_fingerprint(p: &GrayImage) -> u64 {
    let bytes: Vec<u8> = p.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    seed::fnv1a(&bytes)
}

fn check_plan(n_planes: usize, plan: &FoldPlan) -> Result<()> {
    let mut covered = vec![false; n_planes];
    for f in &plan.folds {
        for &i in f.held_out.iter().chain(&f.train) {
            if i >= n_planes {
                return Err(Error::InvalidArgument(format!("fold plan names plane {i}")));
            }
        }
        for &i in &f.held_out {
            covered[i] = true;
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::InvalidArgument("fold plan does not cover the stack".into()));
    }
    Ok(())
}

/// Trains one model per fold on that fold's training planes.
///
/// Planes inside a fold are ordered by content, so a stack permutation that
/// preserves fold membership yields identical models.
pub fn train_fold_models(
    images: &[GrayImage],
    labels: &[LabelMap],
    plan: &FoldPlan,
    spec: &NetworkSpec,
    cfg: &ModelTrainConfig,
) -> Result<Vec<TrainedModel>> {
    if images.len() != labels.len() {
        return Err(Error::Shape("images and labels differ in count".into()));
    }
    check_plan(images.len(), plan)?;
    let img_refs: Vec<&GrayImage> = images.iter().collect();
    let lab_refs: Vec<&LabelMap> = labels.iter().collect();
    let mut models = Vec::with_capacity(plan.k());
    for (f, fold) in plan.folds.iter().enumerate() {
        let mut order: Vec<usize> = fold.train.clone();
        order.sort_by_key(|&i| (plane_fingerprint(&images[i]), i));
        let fold_seed = seed::derive(cfg.train.seed, &format!("fold-{f}"));
        let (tr, va) = holdout_split(order.len(), cfg.val_planes, seed::derive(fold_seed, "holdout"))?;
        let train_idx: Vec<usize> = tr.iter().map(|&j| order[j]).collect();
        let val_idx: Vec<usize> = va.iter().map(|&j| order[j]).collect();
        let fold_cfg = ModelTrainConfig {
            train: TrainConfig { seed: fold_seed, ..cfg.train.clone() },
            ..cfg.clone()
        };
        let model = train_base_model(&img_refs, &lab_refs, &train_idx, &val_idx, spec, &fold_cfg)?;
        log::info!(
            "fold {f}: {} epochs, best val loss {:?}",
            model.history.epochs.len(),
            model.history.best_val_loss()
        );
        models.push(model);
    }
    Ok(models)
}

/// Out-of-fold maps: fold `f`'s model predicts only its held-out planes.
pub fn fold_mdpms(
    models: &[TrainedModel],
    images: &[GrayImage],
    plan: &FoldPlan,
    tta: bool,
    mode: InferenceMode,
) -> Result<MdpmGeneration> {
    check_plan(images.len(), plan)?;
    if models.len() != plan.k() {
        return Err(Error::InvalidArgument(format!("{} models for {} folds", models.len(), plan.k())));
    }
    let mut maps: Vec<Option<ProbMap>> = vec![None; images.len()];
    let mut provenance = Vec::new();
    let mut diverged_folds = Vec::new();
    for (f, (fold, model)) in plan.folds.iter().zip(models).enumerate() {
        if model.history.diverged {
            log::warn!("fold {f}: training diverged, using best snapshot");
            diverged_folds.push(f);
        }
        for &i in &fold.held_out {
            maps[i] = Some(model.infer(&images[i], tta, mode)?);
            provenance.push(Provenance { plane: i, fold: f });
        }
    }
    provenance.sort_by_key(|p| p.plane);
    Ok(MdpmGeneration {
        maps: maps.into_iter().map(|m| m.expect("covered")).collect(),
        models: models.to_vec(),
        provenance,
        diverged_folds,
    })
}

/// Trains the fold models and returns their out-of-fold maps.
pub fn gen_training_mdpms(
    images: &[GrayImage],
    labels: &[LabelMap],
    plan: &FoldPlan,
    spec: &NetworkSpec,
    cfg: &ModelTrainConfig,
) -> Result<MdpmGeneration> {
    let models = train_fold_models(images, labels, plan, spec, cfg)?;
    fold_mdpms(&models, images, plan, cfg.tta, cfg.mode)
}

/// Ensemble map of a plane: the mean of every model's calibrated map.
pub fn ensemble_map(models: &[TrainedModel], plane: &Grid<f64>, tta: bool, mode: InferenceMode) -> Result<ProbMap> {
    let maps: Vec<ProbMap> = models.iter().map(|m| m.infer(plane, tta, mode)).collect::<Result<_>>()?;
    average_maps(&maps)
}
