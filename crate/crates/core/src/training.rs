//! Early-stopped SGD training and the sampling-bias correction curve.

use std::fmt::Write as _;

use log::{debug, warn};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::icnn::{mask_patch, MaskMode};
use crate::imaging::Grid;
use crate::net::{backward, forward, init_params, sgd_step, NetworkParams, NetworkSpec, TrainExample};
use crate::sampling::{extract_patch, transform_patch, BalancedSampler, PaddedPlane, PatchSpec};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new validation minimum before stopping.
    pub patience: usize,
    pub patches_per_epoch: usize,
    pub seed: u64,
    /// Random dihedral transform per sampled patch.
    pub augment: bool,
    /// Center masking of refinement-network patches; ignored for base
    /// networks.
    pub mask_mode: MaskMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 30,
            patience: 5,
            patches_per_epoch: 4000,
            seed: 0,
            augment: true,
            mask_mode: MaskMode::ConstantZero,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("lr={} momentum={}", self.lr, self.momentum)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patches_per_epoch == 0 {
            return Err(Error::Config("batch_size, max_epochs, patches_per_epoch must be > 0".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config("patience exceeds max_epochs".into()));
        }
        Ok(())
    }
}

/// Something that yields a fresh list of training examples per epoch.
pub trait ExampleSource {
    fn epoch_examples(&mut self, n: usize) -> Result<Vec<TrainExample>>;
}

impl ExampleSource for Vec<TrainExample> {
    fn epoch_examples(&mut self, _n: usize) -> Result<Vec<TrainExample>> {
        Ok(self.clone())
    }
}

/// Class-balanced patches drawn from a set of planes, optionally with the
/// center pixel masked (for refinement networks).
#[derive(Debug, Clone)]
pub struct PlanePatchSource {
    planes: Vec<PaddedPlane>,
    sampler: BalancedSampler,
    patch: PatchSpec,
    augment: bool,
    mask: Option<MaskMode>,
}

impl PlanePatchSource {
    pub fn new(
        planes: &[Grid<f64>],
        membrane: &[Grid<bool>],
        patch: PatchSpec,
        seed_value: u64,
        augment: bool,
        mask: Option<MaskMode>,
    ) -> Result<Self> {
        if planes.len() != membrane.len() {
            return Err(Error::Shape("planes and label masks differ in count".into()));
        }
        if let Some((p, m)) = planes.iter().zip(membrane).find(|(p, m)| p.dims() != m.dims()) {
            return Err(Error::Shape(format!("plane {:?} vs labels {:?}", p.dims(), m.dims())));
        }
        Ok(Self {
            planes: planes.iter().map(|p| PaddedPlane::new(p, patch)).collect::<Result<_>>()?,
            sampler: BalancedSampler::new(membrane, seed_value)?,
            patch,
            augment,
            mask,
        })
    }

    /// Draws `n` balanced examples. Masking happens before the dihedral
    /// transform; both leave the center pixel in place.
    pub fn draw(&mut self, n: usize) -> Result<Vec<TrainExample>> {
        let sites = self.sampler.draw(n, self.augment)?;
        sites
            .iter()
            .map(|site| {
                let plane = &self.planes[site.plane];
                let mut patch = extract_patch(plane, site.row, site.col, self.patch)?;
                if let Some(mode) = self.mask {
                    mask_patch(&mut patch, site.row, site.col, plane.dims(), self.patch, mode, self.sampler.rng_mut());
                }
                Ok(TrainExample { patch: transform_patch(patch, site.transform)?, label: site.label })
            })
            .collect()
    }
}

impl ExampleSource for PlanePatchSource {
    fn epoch_examples(&mut self, n: usize) -> Result<Vec<TrainExample>> {
        self.draw(n)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were kept (minimum validation loss).
    pub best_epoch: Option<usize>,
    pub diverged: bool,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> Option<f64> {
        self.best_epoch.map(|e| self.epochs[e].val_loss)
    }

    /// CSV with header `epoch,train_loss,val_loss,is_best`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,is_best\n");
        for r in &self.epochs {
            let best = self.best_epoch == Some(r.epoch);
            writeln!(out, "{},{:.9},{:.9},{}", r.epoch, r.train_loss, r.val_loss, best as u8).unwrap();
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: TrainHistory,
}

/// Mean cross-entropy over `examples`, summed in index order.
pub fn mean_loss(spec: &NetworkSpec, params: &NetworkParams, examples: &[TrainExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("no examples to evaluate".into()));
    }
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|ex| forward(spec, params, &ex.patch).map(|(_, a)| a.loss(ex.label)))
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Averaged gradient of a minibatch and the summed loss. Per-example work
/// runs in parallel; the reduction is sequential in batch order.
fn batch_gradient(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &[TrainExample],
) -> Result<(NetworkParams, f64)> {
    let per_example: Vec<(NetworkParams, f64)> = batch
        .par_iter()
        .map(|ex| {
            let (_, acts) = forward(spec, params, &ex.patch)?;
            backward(spec, params, &acts, ex.label)
        })
        .collect::<Result<_>>()?;
    let mut iter = per_example.into_iter();
    let (mut total, mut loss) = iter.next().expect("non-empty batch");
    for (g, l) in iter {
        total.add_assign(&g);
        loss += l;
    }
    total.scale(1.0 / batch.len() as f64);
    Ok((total, loss))
}

/// Trains a fresh network and returns the parameters of the epoch with the
/// lowest validation loss.
///
/// A non-finite loss or update ends training early; the best snapshot so
/// far is returned with `history.diverged` set.
pub fn train_classifier(
    spec: &NetworkSpec,
    source: &mut dyn ExampleSource,
    val: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation set is empty".into()));
    }
    let mut params = init_params(spec, seed::derive(cfg.seed, "init"))?;
    let mut velocity = params.zeros_like();
    let mut best = params.clone();
    let mut history = TrainHistory::default();
    let mut since_best = 0;

    'epochs: for epoch in 0..cfg.max_epochs {
        let examples = source.epoch_examples(cfg.patches_per_epoch)?;
        if examples.is_empty() {
            return Err(Error::InvalidArgument("example source returned no examples".into()));
        }
        let mut train_total = 0.0;
        for batch in examples.chunks(cfg.batch_size) {
            let step = batch_gradient(spec, &params, batch).and_then(|(g, loss)| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss".into()));
                }
                sgd_step(&mut params, &g, cfg.lr, cfg.momentum, &mut velocity)?;
                Ok(loss)
            });
            match step {
                Ok(loss) => train_total += loss,
                Err(Error::NonFinite(what)) => {
                    warn!("epoch {epoch}: non-finite {what}, stopping");
                    history.diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let train_loss = train_total / examples.len() as f64;
        let val_loss = match mean_loss(spec, &params, val) {
            Ok(v) if v.is_finite() => v,
            Ok(_) | Err(Error::NonFinite(_)) => {
                warn!("epoch {epoch}: non-finite validation loss, stopping");
                history.diverged = true;
                break;
            }
            Err(e) => return Err(e),
        };
        debug!("epoch {epoch}: train {train_loss:.5} val {val_loss:.5}");
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss });
        if history.best_val_loss().is_none_or(|b| val_loss < b) {
            history.best_epoch = Some(epoch);
            best = params.clone();
            since_best = 0;
        } else {
            since_best += 1;
        }
        if since_best >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome { params: best, history })
}

/// Monotone map from raw network output to a corrected probability.
///
/// Bin values are evaluated by linear interpolation between bin centers and
/// held constant beyond the first and last centers.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationCurve {
    edges: Vec<f64>,
    values: Vec<f64>,
}

impl CalibrationCurve {
    pub fn new(edges: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || edges.len() != values.len() + 1 {
            return Err(Error::InvalidArgument("need n_bins + 1 edges for n_bins values".into()));
        }
        if edges[0] != 0.0 || *edges.last().unwrap() != 1.0 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArgument("edges must increase strictly from 0 to 1".into()));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) || values.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument("values must be non-decreasing in [0, 1]".into()));
        }
        Ok(Self { edges, values })
    }

    /// Curve mapping every bin center to itself.
    pub fn identity(n_bins: usize) -> Self {
        let edges = uniform_edges(n_bins);
        let values = edges.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect();
        Self { edges, values }
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn n_bins(&self) -> usize {
        self.values.len()
    }

    pub fn apply(&self, p: f64) -> f64 {
        let centers = self.edges.windows(2).map(|w| (w[0] + w[1]) / 2.0);
        let mut prev: Option<(f64, f64)> = None;
        for (c, &v) in centers.zip(&self.values) {
            if p <= c {
                return match prev {
                    None => v,
                    Some((pc, pv)) => pv + (v - pv) * (p - pc) / (c - pc),
                }
                .clamp(0.0, 1.0);
            }
            prev = Some((c, v));
        }
        *self.values.last().unwrap()
    }

    /// One `edge value` pair per line: the lower edge of every bin with its
    /// value, then the upper edge `1` repeating the last value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (e, v) in self.edges.iter().zip(&self.values) {
            writeln!(out, "{e:.17} {v:.17}").unwrap();
        }
        writeln!(out, "{:.17} {:.17}", 1.0, self.values.last().unwrap()).unwrap();
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut values = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let mut it = line.split_whitespace().map(str::parse::<f64>);
            match (it.next(), it.next(), it.next()) {
                (Some(Ok(e)), Some(Ok(v)), None) => {
                    edges.push(e);
                    values.push(v);
                }
                _ => return Err(Error::Format(format!("bad calibration line `{line}`"))),
            }
        }
        let last = values.pop().ok_or_else(|| Error::Format("empty calibration file".into()))?;
        if values.last() != Some(&last) {
            return Err(Error::Format("terminal calibration line must repeat the last value".into()));
        }
        Self::new(edges, values)
    }
}

fn uniform_edges(n_bins: usize) -> Vec<f64> {
    (0..=n_bins).map(|i| i as f64 / n_bins as f64).collect()
}

/// Pool-adjacent-violators projection onto non-decreasing sequences.
pub fn isotonic(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // Each block: (weighted sum, total weight, member count).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v * w, w, 1));
        while blocks.len() > 1 {
            let (s2, w2, n2) = blocks[blocks.len() - 1];
            let (s1, w1, n1) = blocks[blocks.len() - 2];
            if s1 / w1 <= s2 / w2 {
                break;
            }
            blocks.truncate(blocks.len() - 2);
            blocks.push((s1 + s2, w1 + w2, n1 + n2));
        }
    }
    blocks.into_iter().flat_map(|(s, w, n)| std::iter::repeat_n(s / w, n)).collect()
}

/// Histogram calibration with Laplace smoothing and an isotonic fix-up.
///
/// `value[b] = (membrane_in_b + 1) / (total_in_b + 2)`, then projected onto
/// non-decreasing sequences with weights `total_in_b + 2`.
pub fn fit_calibration(raw: &[f64], labels: &[u8], n_bins: usize) -> Result<CalibrationCurve> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be >= 1".into()));
    }
    if raw.len() != labels.len() || raw.len() < n_bins {
        return Err(Error::InvalidArgument(format!(
            "{} outputs and {} labels for {n_bins} bins",
            raw.len(),
            labels.len()
        )));
    }
    let mut pos = vec![0.0; n_bins];
    let mut tot = vec![0.0; n_bins];
    for (&p, &l) in raw.iter().zip(labels) {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("raw probability {p} outside [0, 1]")));
        }
        let b = ((p * n_bins as f64) as usize).min(n_bins - 1);
        tot[b] += 1.0;
        pos[b] += (l != 0) as u8 as f64;
    }
    let smoothed: Vec<f64> = pos.iter().zip(&tot).map(|(p, t)| (p + 1.0) / (t + 2.0)).collect();
    let weights: Vec<f64> = tot.iter().map(|t| t + 2.0).collect();
    CalibrationCurve::new(uniform_edges(n_bins), isotonic(&smoothed, &weights))
}
